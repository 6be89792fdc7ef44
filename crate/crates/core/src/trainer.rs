//! Teacher-forced training loop: sample a batch of episodes, build one
//! loss graph per episode, average gradients, and take one optimizer
//! step.
//!
//! Determinism contract: a seed fixes the init, the batch indices, and
//! every noise draw, and gradient accumulation runs in episode order
//! whatever the worker count, so runs with the same seed, data, and
//! config produce bitwise-identical loss curves and parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::checkpoint::{checkpoint_to_bytes, Checkpoint};
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::model::{
    draw_step_noise, encode_episode_frames, episode_loss_graph, register_model_params, Episode,
    ModelConfig, StepDraws,
};
use crate::optim::{AdamW, ParamStore};
use crate::schedule::Schedule;

/// Adam moments decay, epsilon, and decoupled weight decay, fixed for
/// every run.
pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.95;
pub const ADAM_EPS: f32 = 1e-8;
pub const WEIGHT_DECAY: f32 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Total optimizer steps.
    pub steps: usize,
    /// Episodes per optimizer step, sampled with replacement.
    pub batch_size: usize,
    /// Peak learning rate; cosine-decayed to zero over `steps`.
    pub lr: f32,
    /// Independent (t, noise) draws per step and modality, averaged.
    pub r_draws: usize,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Worker threads for per-episode gradient computation.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 8,
            lr: 1e-4,
            r_draws: 4,
            seed: 0,
            checkpoint_every: 500,
            jobs: 1,
        }
    }
}

pub const TRAIN_KEYS: &[&str] =
    &["steps", "batch_size", "lr", "r_draws", "seed", "checkpoint_every", "jobs"];

/// Apply one `key=value` pair onto a train config; unknown keys are the
/// caller's to reject or route elsewhere.
pub fn apply_train_key(cfg: &mut TrainConfig, k: &str, v: &str) -> Result<()> {
    fn count(k: &str, v: &str) -> Result<usize> {
        v.parse().map_err(|_| CoreError::Config(format!("key `{k}`: `{v}` is not a count")))
    }
    match k {
        "steps" => cfg.steps = count(k, v)?,
        "batch_size" => cfg.batch_size = count(k, v)?,
        "lr" => {
            cfg.lr = v
                .parse()
                .map_err(|_| CoreError::Config(format!("key `lr`: `{v}` is not a number")))?
        }
        "r_draws" => cfg.r_draws = count(k, v)?,
        "seed" => {
            cfg.seed = v
                .parse()
                .map_err(|_| CoreError::Config(format!("key `seed`: `{v}` is not an integer")))?
        }
        "checkpoint_every" => cfg.checkpoint_every = count(k, v)?,
        "jobs" => cfg.jobs = count(k, v)?,
        other => return Err(CoreError::Config(format!("unknown key `{other}`"))),
    }
    Ok(())
}

/// Cosine decay from `peak` at step 0 toward zero at `total`.
pub fn cosine_lr(peak: f32, step: u64, total: u64) -> f32 {
    if total <= 1 {
        return peak;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    (peak as f64 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())) as f32
}

/// One episode shaped for the fixed training layout: exactly `n_max`
/// chunks (right-padded by repeating the last frame with zero chunks, or
/// truncated to the first `n_max` transitions), with `n_real` recording
/// how many transitions carry loss.
#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    pub episode: Episode,
    pub n_real: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub items: Vec<PreparedEpisode>,
    /// Episodes dropped for having no transition.
    pub skipped: usize,
}

/// Shape raw episodes onto the training layout. Episodes without at
/// least one transition are counted in `skipped` and dropped.
pub fn make_training_batch(episodes: &[Episode], n_max: usize) -> TrainingBatch {
    assert!(n_max >= 1, "layout needs at least one predicted step");
    let mut items = Vec::with_capacity(episodes.len());
    let mut skipped = 0;
    for ep in episodes {
        if ep.images.len() < 2 {
            skipped += 1;
            continue;
        }
        let n_real = ep.chunks.len().min(n_max);
        let mut episode = Episode {
            task_id: ep.task_id,
            images: ep.images[..=n_real].to_vec(),
            chunks: ep.chunks[..n_real].to_vec(),
        };
        let chunk_len = episode.chunks[0].len();
        while episode.chunks.len() < n_max {
            episode.images.push(episode.images.last().unwrap().clone());
            episode.chunks.push(vec![0.0; chunk_len]);
        }
        items.push(PreparedEpisode { episode, n_real });
    }
    TrainingBatch { items, skipped }
}

/// Batch-mean losses from one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f32,
    pub obs: f32,
    pub act: f32,
}

struct EpisodeResult {
    total: f32,
    obs: f32,
    act: f32,
    /// Per predicted step (frame loss, chunk loss), for diagnostics.
    steps: Vec<(f32, f32)>,
    grads: Vec<(usize, Vec<f32>)>,
}

/// Loss values and gradients for one episode, with the loss pre-scaled
/// by `inv_b` so accumulated gradients average over the batch.
fn episode_result(
    store: &ParamStore,
    cfg: &ModelConfig,
    sched: &Schedule,
    item: &PreparedEpisode,
    draws: &[StepDraws],
    inv_b: f32,
) -> EpisodeResult {
    let tokens = encode_episode_frames(store, cfg, &item.episode);
    let mut g = Graph::new(store);
    let lg = episode_loss_graph(&mut g, cfg, sched, &item.episode, &tokens, item.n_real, draws);
    let scaled = g.scale(lg.total, inv_b);
    g.backward(scaled);
    let total = g.value(lg.total).data[0];
    let obs = lg.obs.map(|o| g.value(o).data[0]).unwrap_or(0.0);
    let act = g.value(lg.act).data[0];
    let steps = lg
        .steps
        .iter()
        .map(|s| (s.obs.map(|o| g.value(o).data[0]).unwrap_or(0.0), g.value(s.act).data[0]))
        .collect();
    EpisodeResult { total, obs, act, steps, grads: g.into_param_grads() }
}

/// Owns everything one training run mutates: parameters, optimizer,
/// and the RNG driving batch sampling and noise draws.
pub struct Trainer {
    pub cfg: ModelConfig,
    pub tcfg: TrainConfig,
    pub store: ParamStore,
    pub opt: AdamW,
    pub rng: ChaCha12Rng,
    sched: Schedule,
}

impl Trainer {
    /// Fresh seeded run. Init draws come from stream 0 of the seed and
    /// training draws from stream 1, so neither stream depends on how
    /// much the other consumed.
    pub fn new(cfg: ModelConfig, tcfg: TrainConfig) -> Self {
        assert!(tcfg.batch_size >= 1 && tcfg.r_draws >= 1, "degenerate train config");
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha12Rng::seed_from_u64(tcfg.seed);
        register_model_params(&mut store, &mut init_rng, &cfg);
        let opt = AdamW::new(&store, ADAM_BETA1, ADAM_BETA2, ADAM_EPS, WEIGHT_DECAY);
        let mut rng = ChaCha12Rng::seed_from_u64(tcfg.seed);
        rng.set_stream(1);
        let sched = cfg.schedule();
        Trainer { cfg, tcfg, store, opt, rng, sched }
    }

    /// Resume from a checkpoint: parameters, moments, step count, and
    /// the RNG continue exactly where the saved run stopped.
    pub fn from_checkpoint(ck: Checkpoint, tcfg: TrainConfig) -> Self {
        let sched = ck.cfg.schedule();
        Trainer { cfg: ck.cfg, tcfg, store: ck.store, opt: ck.opt, rng: ck.rng, sched }
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step_count()
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint_to_bytes(&self.cfg, &self.store, &self.opt, &self.rng)
    }

    /// One optimizer step on a batch sampled with replacement.
    pub fn train_step(&mut self, batch: &TrainingBatch) -> Result<LossBreakdown> {
        assert!(!batch.items.is_empty(), "empty training batch");
        let indices: Vec<usize> =
            (0..self.tcfg.batch_size).map(|_| self.rng.gen_range(0..batch.items.len())).collect();
        self.train_step_indices(batch, &indices)
    }

    /// One optimizer step on the given episodes. Noise draws are taken
    /// episode by episode, step by step, before any gradient work, so
    /// worker count cannot reorder RNG consumption.
    pub fn train_step_indices(
        &mut self,
        batch: &TrainingBatch,
        indices: &[usize],
    ) -> Result<LossBreakdown> {
        assert!(!indices.is_empty(), "empty batch indices");
        let items: Vec<&PreparedEpisode> = indices.iter().map(|&i| &batch.items[i]).collect();
        let draws: Vec<Vec<StepDraws>> = items
            .iter()
            .map(|it| {
                (0..it.n_real)
                    .map(|_| draw_step_noise(&self.cfg, &self.sched, self.tcfg.r_draws, &mut self.rng))
                    .collect()
            })
            .collect();

        let inv_b = 1.0 / items.len() as f32;
        let jobs = self.tcfg.jobs.max(1).min(items.len());
        let (store, cfg, sched) = (&self.store, &self.cfg, &self.sched);
        let compute = |slot: usize| episode_result(store, cfg, sched, items[slot], &draws[slot], inv_b);
        let results: Vec<EpisodeResult> = if jobs == 1 {
            (0..items.len()).map(compute).collect()
        } else {
            // Contiguous slot ranges per worker keep episode order when
            // the per-worker outputs are concatenated.
            let per = items.len().div_ceil(jobs);
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..jobs)
                    .map(|w| {
                        let lo = w * per;
                        let hi = ((w + 1) * per).min(items.len());
                        let compute = &compute;
                        s.spawn(move || (lo..hi).map(compute).collect::<Vec<_>>())
                    })
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("gradient worker panicked")).collect()
            })
        };

        let step = self.opt.step_count();
        let mut sum = LossBreakdown { total: 0.0, obs: 0.0, act: 0.0 };
        for (slot, r) in results.iter().enumerate() {
            if !r.total.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "non-finite loss at step {step}, batch slot {slot} (episode {}): \
                     total={} obs={} act={}, per-step (frame, chunk) losses {:?}",
                    indices[slot], r.total, r.obs, r.act, r.steps
                )));
            }
            sum.total += r.total;
            sum.obs += r.obs;
            sum.act += r.act;
        }

        self.store.zero_grads();
        for r in &results {
            for (idx, grad) in &r.grads {
                self.store.accumulate_grad(*idx, grad);
            }
        }
        let lr = cosine_lr(self.tcfg.lr, step, self.tcfg.steps as u64);
        self.opt.step(&mut self.store, lr)?;

        Ok(LossBreakdown {
            total: sum.total * inv_b,
            obs: sum.obs * inv_b,
            act: sum.act * inv_b,
        })
    }
}
