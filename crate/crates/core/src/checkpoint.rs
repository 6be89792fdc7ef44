//! Checkpoint files: model configuration, every named parameter,
//! optimizer state, and the training RNG, restored bit for bit.
//!
//! Layout (little-endian): magic `PARC`, u32 version, length-prefixed
//! config text, RNG state (32-byte seed, u128 word position, u64
//! stream), optimizer scalars (u64 step count, f32 beta1/beta2/eps/
//! weight decay), u32 parameter count, then per parameter: name, u8
//! trainable flag, u32 rank and dims, values, first moments, second
//! moments, all f32.
//!
//! Saving iterates the store in registration order and the writer emits
//! a canonical byte stream, so save, load, save reproduces the file
//! exactly.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{CoreError, Result};
use crate::io::{Reader, Writer};
use crate::model::{register_model_params, ModelConfig};
use crate::optim::{AdamW, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PARC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
pub struct Checkpoint {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub opt: AdamW,
    pub rng: ChaCha12Rng,
}

pub fn checkpoint_to_bytes(
    cfg: &ModelConfig,
    store: &ParamStore,
    opt: &AdamW,
    rng: &ChaCha12Rng,
) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.str(&cfg.to_kv());
    w.bytes(&rng.get_seed());
    w.u128(rng.get_word_pos());
    w.u64(rng.get_stream());
    w.u64(opt.step_count());
    w.f32(opt.beta1);
    w.f32(opt.beta2);
    w.f32(opt.eps);
    w.f32(opt.weight_decay);
    w.u32(store.len() as u32);
    for idx in 0..store.len() {
        let t = store.tensor(idx);
        w.str(store.name(idx));
        w.u8(store.is_trainable(idx) as u8);
        w.u32(t.shape.len() as u32);
        for &d in &t.shape {
            w.u32(d as u32);
        }
        w.f32_slice(&t.data);
        let (m, v) = opt.moments(idx);
        w.f32_slice(m);
        w.f32_slice(v);
    }
    w.buf
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(buf);
    r.expect_magic(CHECKPOINT_MAGIC, "checkpoint magic")?;
    let version = r.u32("checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CoreError::Corrupt {
            what: "checkpoint version".into(),
            offset: 4,
            detail: format!("version {version}, this build reads {CHECKPOINT_VERSION}"),
        });
    }
    let cfg_text = r.str("config text")?;
    let cfg = ModelConfig::from_kv(&cfg_text)?;

    let seed: [u8; 32] = r.bytes(32, "rng seed")?.try_into().unwrap();
    let word_pos = r.u128("rng word position")?;
    let stream = r.u64("rng stream")?;
    let mut rng = ChaCha12Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let opt_step = r.u64("optimizer step count")?;
    let beta1 = r.f32("optimizer beta1")?;
    let beta2 = r.f32("optimizer beta2")?;
    let eps = r.f32("optimizer eps")?;
    let weight_decay = r.f32("optimizer weight decay")?;

    // The config decides which parameters exist; the file must carry
    // exactly that set, in registration order, with matching shapes.
    let mut store = ParamStore::new();
    let mut init_rng = ChaCha12Rng::seed_from_u64(0);
    register_model_params(&mut store, &mut init_rng, &cfg);
    let n_params = r.count("parameter count", 1)?;
    if n_params != store.len() {
        return Err(CoreError::Corrupt {
            what: "parameter count".into(),
            offset: (r.offset() - 4) as u64,
            detail: format!("file has {n_params}, config implies {}", store.len()),
        });
    }
    let mut opt = AdamW::new(&store, beta1, beta2, eps, weight_decay);
    opt.set_step_count(opt_step);
    for idx in 0..n_params {
        let name = r.str("parameter name")?;
        if name != store.name(idx) {
            return Err(CoreError::Corrupt {
                what: "parameter name".into(),
                offset: r.offset() as u64,
                detail: format!("file has `{name}` where config implies `{}`", store.name(idx)),
            });
        }
        let trainable = r.u8("trainable flag")? != 0;
        if trainable != store.is_trainable(idx) {
            return Err(CoreError::Corrupt {
                what: format!("parameter `{name}`"),
                offset: (r.offset() - 1) as u64,
                detail: "trainable flag disagrees with config".into(),
            });
        }
        let rank = r.u32("shape rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("shape dim")? as usize);
        }
        if shape != store.tensor(idx).shape {
            return Err(CoreError::Corrupt {
                what: format!("parameter `{name}`"),
                offset: r.offset() as u64,
                detail: format!(
                    "shape {:?} disagrees with config shape {:?}",
                    shape,
                    store.tensor(idx).shape
                ),
            });
        }
        let n: usize = shape.iter().product();
        let data = r.f32_vec(n, &format!("parameter `{name}` values"))?;
        *store.tensor_mut(idx) = Tensor::new(&shape, data);
        let m = r.f32_vec(n, &format!("parameter `{name}` first moments"))?;
        let v = r.f32_vec(n, &format!("parameter `{name}` second moments"))?;
        let (ms, vs) = opt.moments_mut(idx);
        ms.copy_from_slice(&m);
        vs.copy_from_slice(&v);
    }
    r.finish("checkpoint")?;
    Ok(Checkpoint { cfg, store, opt, rng })
}

pub fn save_checkpoint<P: AsRef<Path>>(
    path: P,
    cfg: &ModelConfig,
    store: &ParamStore,
    opt: &AdamW,
    rng: &ChaCha12Rng,
) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(cfg, store, opt, rng))?;
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Checkpoint> {
    let buf = std::fs::read(path)?;
    checkpoint_from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use rand::RngCore;

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::reference();
        cfg.d = 16;
        cfg.n_layers = 1;
        cfg.n_heads = 2;
        cfg.mlp_ratio = 2;
        cfg.k_text = 2;
        cfg.img_h = 8;
        cfg.img_w = 8;
        cfg.img_c = 1;
        cfg.patch = 4;
        cfg.l = 2;
        cfg.t_max = 20;
        cfg.act_width = 16;
        cfg.act_blocks = 1;
        cfg.act_mlp_ratio = 2;
        cfg.frame_hidden = 16;
        cfg.frame_attn_dim = 8;
        cfg.reg_hidden = 8;
        cfg
    }

    fn populated(seed: u64) -> (ModelConfig, ParamStore, AdamW, ChaCha12Rng) {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        register_model_params(&mut store, &mut rng, &cfg);
        let mut opt = AdamW::new(&store, 0.9, 0.95, 1e-8, 0.01);
        opt.set_step_count(17);
        // Scribble on the moments so the round trip carries real state.
        for idx in 0..store.len() {
            let (m, v) = opt.moments_mut(idx);
            for (j, x) in m.iter_mut().enumerate() {
                *x = (idx as f32) + j as f32 * 0.001;
            }
            for (j, x) in v.iter_mut().enumerate() {
                *x = 0.5 + (j % 7) as f32;
            }
        }
        let mut train_rng = ChaCha12Rng::seed_from_u64(seed ^ 0xabcd);
        train_rng.next_u64();
        train_rng.next_u32();
        (cfg, store, opt, train_rng)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (cfg, store, opt, rng) = populated(1);
        let bytes = checkpoint_to_bytes(&cfg, &store, &opt, &rng);
        let ck = checkpoint_from_bytes(&bytes).unwrap();
        let again = checkpoint_to_bytes(&ck.cfg, &ck.store, &ck.opt, &ck.rng);
        assert_eq!(bytes, again);
    }

    #[test]
    fn load_restores_params_opt_and_rng_exactly() {
        let (cfg, store, opt, mut rng) = populated(2);
        let bytes = checkpoint_to_bytes(&cfg, &store, &opt, &rng);
        let mut ck = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(ck.cfg, cfg);
        assert_eq!(ck.store.len(), store.len());
        for idx in 0..store.len() {
            assert_eq!(ck.store.name(idx), store.name(idx));
            assert_eq!(ck.store.tensor(idx), store.tensor(idx));
            assert_eq!(ck.store.is_trainable(idx), store.is_trainable(idx));
            assert_eq!(ck.opt.moments(idx), opt.moments(idx));
        }
        assert_eq!(ck.opt.step_count(), opt.step_count());
        // The restored RNG continues the exact stream.
        let want: Vec<u64> = (0..8).map(|_| rng.next_u64()).collect();
        let got: Vec<u64> = (0..8).map(|_| ck.rng.next_u64()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn rejects_magic_version_truncation_and_name_swap() {
        let (cfg, store, opt, rng) = populated(3);
        let good = checkpoint_to_bytes(&cfg, &store, &opt, &rng);

        let mut bad = good.clone();
        bad[0] = b'Q';
        assert!(matches!(
            checkpoint_from_bytes(&bad),
            Err(CoreError::Corrupt { offset: 0, .. })
        ));

        let mut bad = good.clone();
        bad[4] = 9;
        let err = checkpoint_from_bytes(&bad).err().unwrap();
        assert!(format!("{err}").contains("version"), "unexpected error: {err}");

        for frac in [10, 30, 60, 95] {
            let cut = good.len() * frac / 100;
            let err = checkpoint_from_bytes(&good[..cut]).err().unwrap();
            match err {
                CoreError::Corrupt { offset, .. } => {
                    assert!(offset as usize <= cut, "offset {offset} beyond cut {cut}")
                }
                other => panic!("wanted corruption error, got {other}"),
            }
        }

        // Swap one byte inside the first parameter's name.
        let name_at = good
            .windows(8)
            .position(|w| w == b"tok.text")
            .expect("first parameter name in file");
        let mut bad = good.clone();
        bad[name_at] = b'x';
        let err = checkpoint_from_bytes(&bad).err().unwrap();
        assert!(format!("{err}").contains("parameter"), "unexpected error: {err}");
    }

    #[test]
    fn config_decides_the_parameter_set() {
        let (cfg, store, opt, rng) = populated(4);
        let bytes = checkpoint_to_bytes(&cfg, &store, &opt, &rng);
        // Rewrite the embedded config to a different variant: the
        // parameter list no longer matches and the load must fail.
        let mut other = cfg.clone();
        other.variant = Variant::NoAr;
        let old_kv = cfg.to_kv();
        let new_kv = other.to_kv();
        assert_eq!(old_kv.len(), new_kv.len(), "test needs equal-length config texts");
        let at = bytes
            .windows(old_kv.len())
            .position(|w| w == old_kv.as_bytes())
            .expect("config text in file");
        let mut bad = bytes.clone();
        bad[at..at + new_kv.len()].copy_from_slice(new_kv.as_bytes());
        let err = checkpoint_from_bytes(&bad).err().unwrap();
        assert!(format!("{err}").contains("parameter"), "unexpected error: {err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.parc");
        let (cfg, store, opt, rng) = populated(5);
        save_checkpoint(&path, &cfg, &store, &opt, &rng).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(
            checkpoint_to_bytes(&ck.cfg, &ck.store, &ck.opt, &ck.rng),
            checkpoint_to_bytes(&cfg, &store, &opt, &rng)
        );
    }
}
