//! Full model assembly: embedding tables, backbone, and de-tokenizer
//! heads behind one parameter store.
//!
//! The training path builds one autodiff graph per episode (teacher
//! forcing: ground-truth tokens everywhere, all steps' losses in one
//! forward). The inference path drives the same weights through the
//! plain kernels against a KV cache; a sampled future frame is appended
//! only long enough to condition the chunk sampler, then rolled back, so
//! committed context always holds real observations and executed chunks.
//!
//! Step pairing: block n holds [frame_n | chunk_n] where chunk_n is the
//! chunk whose execution produced frame_n. Block 0 pairs the initial
//! frame with the begin-of-action placeholder, so block widths are
//! uniform and step 0 is never predicted.

use crate::backbone::{self, BackboneConfig, KvCache};
use crate::detok::{
    self, action_denoise_graph, frame_denoise_graph, regressor_graph, ActionDitCfg, FrameHeadCfg,
    RegressorCfg,
};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::layout::SeqLayout;
use crate::optim::ParamStore;
use crate::schedule::{BetaSchedule, Schedule};
use crate::tensor::{kernels, Tensor};
use crate::tokenizer::{encode_frame, PatchGeom};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Backbone + generative frame and action heads.
    Full,
    /// No backbone: the chunk head conditions directly on the embedded
    /// text and current-frame tokens. Action loss only.
    NoAr,
    /// Backbone + generative frame head, but a deterministic regressor
    /// in place of the chunk sampler.
    Discrete,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAr => "noar",
            Variant::Discrete => "discrete",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "noar" => Ok(Variant::NoAr),
            "discrete" => Ok(Variant::Discrete),
            other => Err(CoreError::Config(format!(
                "unknown variant `{other}` (expected full, noar, or discrete)"
            ))),
        }
    }

    pub fn has_backbone(self) -> bool {
        !matches!(self, Variant::NoAr)
    }

    pub fn has_frame_head(self) -> bool {
        !matches!(self, Variant::NoAr)
    }

    /// Whether the chunk head samples (diffusion) or regresses.
    pub fn samples_chunks(self) -> bool {
        !matches!(self, Variant::Discrete)
    }
}

fn beta_name(b: BetaSchedule) -> &'static str {
    match b {
        BetaSchedule::Linear => "linear",
        BetaSchedule::Cosine => "cosine",
    }
}

fn beta_parse(s: &str) -> Result<BetaSchedule> {
    match s {
        "linear" => Ok(BetaSchedule::Linear),
        "cosine" => Ok(BetaSchedule::Cosine),
        other => Err(CoreError::Config(format!("unknown beta schedule `{other}`"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub rope_base_coarse: f32,
    pub rope_base_fine: f32,
    pub k_text: usize,
    pub n_tasks: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub img_c: usize,
    pub patch: usize,
    /// Actions per chunk; also the number of action tokens per block.
    pub l: usize,
    pub d_a: usize,
    /// Maximum chunks per episode; context capacity is n_max + 1 blocks.
    pub n_max: usize,
    /// Spatial sets per generated frame.
    pub k_sets: usize,
    pub beta: BetaSchedule,
    pub t_max: usize,
    pub t_infer: usize,
    pub act_width: usize,
    pub act_blocks: usize,
    pub act_mlp_ratio: usize,
    pub frame_hidden: usize,
    pub frame_attn_dim: usize,
    pub reg_hidden: usize,
}

impl ModelConfig {
    /// The configuration every default experiment runs.
    pub fn reference() -> Self {
        ModelConfig {
            variant: Variant::Full,
            d: 64,
            n_layers: 4,
            n_heads: 4,
            mlp_ratio: 4,
            rope_base_coarse: 10_000.0,
            rope_base_fine: 100.0,
            k_text: 3,
            n_tasks: 3,
            img_h: 24,
            img_w: 24,
            img_c: 3,
            patch: 6,
            l: 4,
            d_a: 2,
            n_max: 8,
            k_sets: 4,
            beta: BetaSchedule::Linear,
            t_max: 1000,
            t_infer: 100,
            act_width: 64,
            act_blocks: 3,
            act_mlp_ratio: 4,
            frame_hidden: 256,
            frame_attn_dim: 64,
            reg_hidden: 256,
        }
    }

    pub fn geom(&self) -> PatchGeom {
        PatchGeom::new(self.img_h, self.img_w, self.img_c, self.patch)
    }

    pub fn k_obs(&self) -> usize {
        self.geom().n_patches()
    }

    pub fn k_act(&self) -> usize {
        self.l
    }

    pub fn chunk_len(&self) -> usize {
        self.l * self.d_a
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            d: self.d,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            mlp_ratio: self.mlp_ratio,
            rope_base_coarse: self.rope_base_coarse,
            rope_base_fine: self.rope_base_fine,
        }
    }

    pub fn layout(&self, n_blocks: usize) -> SeqLayout {
        SeqLayout::new(self.k_text, self.k_obs(), self.k_act(), n_blocks)
    }

    pub fn action_head(&self) -> ActionDitCfg {
        ActionDitCfg {
            l: self.l,
            d_a: self.d_a,
            d_cond: self.d,
            width: self.act_width,
            blocks: self.act_blocks,
            mlp_ratio: self.act_mlp_ratio,
        }
    }

    pub fn frame_head(&self) -> FrameHeadCfg {
        FrameHeadCfg {
            d_z: self.d,
            d_cond: self.d,
            hidden: self.frame_hidden,
            attn_dim: self.frame_attn_dim,
        }
    }

    pub fn regressor(&self) -> RegressorCfg {
        RegressorCfg {
            l: self.l,
            d_a: self.d_a,
            n_cond: self.k_act(),
            d_cond: self.d,
            hidden: self.reg_hidden,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::new(self.beta, self.t_max)
    }

    /// Flat `key=value` lines, one per field, in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        put("variant", self.variant.name().into());
        put("d", self.d.to_string());
        put("n_layers", self.n_layers.to_string());
        put("n_heads", self.n_heads.to_string());
        put("mlp_ratio", self.mlp_ratio.to_string());
        put("rope_base_coarse", self.rope_base_coarse.to_string());
        put("rope_base_fine", self.rope_base_fine.to_string());
        put("k_text", self.k_text.to_string());
        put("n_tasks", self.n_tasks.to_string());
        put("img_h", self.img_h.to_string());
        put("img_w", self.img_w.to_string());
        put("img_c", self.img_c.to_string());
        put("patch", self.patch.to_string());
        put("l", self.l.to_string());
        put("d_a", self.d_a.to_string());
        put("n_max", self.n_max.to_string());
        put("k_sets", self.k_sets.to_string());
        put("beta", beta_name(self.beta).into());
        put("t_max", self.t_max.to_string());
        put("t_infer", self.t_infer.to_string());
        put("act_width", self.act_width.to_string());
        put("act_blocks", self.act_blocks.to_string());
        put("act_mlp_ratio", self.act_mlp_ratio.to_string());
        put("frame_hidden", self.frame_hidden.to_string());
        put("frame_attn_dim", self.frame_attn_dim.to_string());
        put("reg_hidden", self.reg_hidden.to_string());
        s
    }

    /// Parse the `to_kv` format. Unknown keys and missing keys are both
    /// configuration errors, so stale or foreign files are rejected.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::reference();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("line {}: missing `=`", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(CoreError::Config(format!("duplicate key `{k}`")));
            }
            apply_model_key(&mut cfg, k, v)?;
        }
        for k in MODEL_KEYS {
            if !seen.contains(*k) {
                return Err(CoreError::Config(format!("missing key `{k}`")));
            }
        }
        Ok(cfg)
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "variant",
    "d",
    "n_layers",
    "n_heads",
    "mlp_ratio",
    "rope_base_coarse",
    "rope_base_fine",
    "k_text",
    "n_tasks",
    "img_h",
    "img_w",
    "img_c",
    "patch",
    "l",
    "d_a",
    "n_max",
    "k_sets",
    "beta",
    "t_max",
    "t_infer",
    "act_width",
    "act_blocks",
    "act_mlp_ratio",
    "frame_hidden",
    "frame_attn_dim",
    "reg_hidden",
];

fn parse_usize(k: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| CoreError::Config(format!("key `{k}`: `{v}` is not a count")))
}

fn parse_f32(k: &str, v: &str) -> Result<f32> {
    v.parse().map_err(|_| CoreError::Config(format!("key `{k}`: `{v}` is not a number")))
}

/// Apply one `key=value` pair onto a config. Shared with the run-config
/// parser so model keys mean the same thing everywhere.
pub fn apply_model_key(cfg: &mut ModelConfig, k: &str, v: &str) -> Result<()> {
    match k {
        "variant" => cfg.variant = Variant::parse(v)?,
        "d" => cfg.d = parse_usize(k, v)?,
        "n_layers" => cfg.n_layers = parse_usize(k, v)?,
        "n_heads" => cfg.n_heads = parse_usize(k, v)?,
        "mlp_ratio" => cfg.mlp_ratio = parse_usize(k, v)?,
        "rope_base_coarse" => cfg.rope_base_coarse = parse_f32(k, v)?,
        "rope_base_fine" => cfg.rope_base_fine = parse_f32(k, v)?,
        "k_text" => cfg.k_text = parse_usize(k, v)?,
        "n_tasks" => cfg.n_tasks = parse_usize(k, v)?,
        "img_h" => cfg.img_h = parse_usize(k, v)?,
        "img_w" => cfg.img_w = parse_usize(k, v)?,
        "img_c" => cfg.img_c = parse_usize(k, v)?,
        "patch" => cfg.patch = parse_usize(k, v)?,
        "l" => cfg.l = parse_usize(k, v)?,
        "d_a" => cfg.d_a = parse_usize(k, v)?,
        "n_max" => cfg.n_max = parse_usize(k, v)?,
        "k_sets" => cfg.k_sets = parse_usize(k, v)?,
        "beta" => cfg.beta = beta_parse(v)?,
        "t_max" => cfg.t_max = parse_usize(k, v)?,
        "t_infer" => cfg.t_infer = parse_usize(k, v)?,
        "act_width" => cfg.act_width = parse_usize(k, v)?,
        "act_blocks" => cfg.act_blocks = parse_usize(k, v)?,
        "act_mlp_ratio" => cfg.act_mlp_ratio = parse_usize(k, v)?,
        "frame_hidden" => cfg.frame_hidden = parse_usize(k, v)?,
        "frame_attn_dim" => cfg.frame_attn_dim = parse_usize(k, v)?,
        "reg_hidden" => cfg.reg_hidden = parse_usize(k, v)?,
        other => return Err(CoreError::Config(format!("unknown key `{other}`"))),
    }
    Ok(())
}

// ── Parameter registration ────────────────────────────────────────────────

/// Register every parameter of the selected variant in a fixed name
/// order, so a seeded RNG yields a reproducible init. The patchifier is
/// registered non-trainable: it is the frozen codec whose outputs are
/// both the backbone's frame inputs and the frame head's diffusion
/// targets, and a moving target would let training shrink the loss by
/// shrinking the representation instead of learning it.
pub fn register_model_params<R: rand::Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &ModelConfig,
) {
    let d = cfg.d;
    let geom = cfg.geom();
    let (gh, gw) = geom.grid();
    store.insert("tok.text", Tensor::randn(rng, &[cfg.n_tasks * cfg.k_text, d], 0.02), true);
    store.insert(
        "tok.patch.w",
        Tensor::randn(rng, &[geom.patch_dim(), d], 1.0 / (geom.patch_dim() as f32).sqrt()),
        false,
    );
    // Sequence assembly (the begin-of-action row and the chunk encoder)
    // exists only for backbone variants; the history-free variant never
    // embeds chunks, and a registered parameter outside every loss graph
    // would trip the optimizer's missing-gradient guard.
    if cfg.variant.has_backbone() {
        store.insert("tok.boa", Tensor::randn(rng, &[1, d], 0.02), true);
        store.insert(
            "tok.act.w1",
            Tensor::randn(rng, &[cfg.d_a, d], 1.0 / (cfg.d_a as f32).sqrt()),
            true,
        );
        store.insert("tok.act.b1", Tensor::zeros(&[d]), true);
        store.insert("tok.act.w2", Tensor::randn(rng, &[d, d], 1.0 / (d as f32).sqrt()), true);
        store.insert("tok.act.b2", Tensor::zeros(&[d]), true);
    }
    store.insert("tok.pos2d.row", Tensor::randn(rng, &[gh, d], 0.02), true);
    store.insert("tok.pos2d.col", Tensor::randn(rng, &[gw, d], 0.02), true);
    if cfg.variant.has_backbone() {
        backbone::register_backbone_params(store, rng, &cfg.backbone());
    }
    match cfg.variant {
        Variant::Full | Variant::NoAr => {
            detok::register_action_dit_params(store, rng, &cfg.action_head(), "ah");
        }
        Variant::Discrete => {
            detok::register_regressor_params(store, rng, &cfg.regressor(), "dh");
        }
    }
    if cfg.variant.has_frame_head() {
        detok::register_frame_head_params(store, rng, &cfg.frame_head(), "fh");
    }
}

/// Trainable parameter count for the variant (excludes the frozen
/// patchifier).
pub fn trainable_param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d;
    let (gh, gw) = cfg.geom().grid();
    let mut n = cfg.n_tasks * cfg.k_text * d; // text table
    if cfg.variant.has_backbone() {
        n += d; // boa
        n += cfg.d_a * d + d + d * d + d; // chunk encoder
    }
    n += (gh + gw) * d; // 2-d frame positions
    if cfg.variant.has_backbone() {
        n += backbone::backbone_param_count(&cfg.backbone());
    }
    n += match cfg.variant {
        Variant::Full | Variant::NoAr => detok::action_dit_param_count(&cfg.action_head()),
        Variant::Discrete => detok::regressor_param_count(&cfg.regressor()),
    };
    if cfg.variant.has_frame_head() {
        n += detok::frame_head_param_count(&cfg.frame_head());
    }
    n
}

// ── Episodes and noise draws ──────────────────────────────────────────────

/// One teacher-forcing episode: frames and the chunks that produced
/// them. `images[n]` is the observation after executing `chunks[n-1]`;
/// `images[0]` is the reset observation, paired with no chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task_id: usize,
    /// `n_blocks` images, each `img_h * img_w * img_c` floats in [0,1].
    pub images: Vec<Vec<f32>>,
    /// `n_blocks - 1` chunks, each `l * d_a` floats in [-1,1].
    pub chunks: Vec<Vec<f32>>,
}

impl Episode {
    pub fn n_blocks(&self) -> usize {
        self.images.len()
    }

    pub fn check(&self, cfg: &ModelConfig) {
        assert_eq!(self.images.len(), self.chunks.len() + 1, "one more image than chunks");
        assert!(self.images.len() >= 2, "an episode needs at least one transition");
        assert!(self.task_id < cfg.n_tasks, "task id {} outside vocabulary", self.task_id);
        let img_len = cfg.geom().image_len();
        for (i, img) in self.images.iter().enumerate() {
            assert_eq!(img.len(), img_len, "image {i} length");
        }
        for (i, c) in self.chunks.iter().enumerate() {
            assert_eq!(c.len(), cfg.chunk_len(), "chunk {i} length");
            assert!(
                c.iter().all(|v| (-1.0..=1.0).contains(v)),
                "chunk {i} has entries outside [-1,1]: normalization bug upstream"
            );
        }
    }
}

/// Frozen-codec frame tokens for every image of an episode.
pub fn encode_episode_frames(store: &ParamStore, cfg: &ModelConfig, ep: &Episode) -> Vec<Tensor> {
    let geom = cfg.geom();
    let w_enc = store.tensor(store.index_of("tok.patch.w"));
    ep.images.iter().map(|img| encode_frame(&geom, img, w_enc)).collect()
}

#[derive(Debug, Clone)]
pub struct FrameDraw {
    pub t: usize,
    /// Full-frame noise; only the active set's rows are consumed.
    pub eps: Tensor,
    pub sets: Vec<Vec<usize>>,
    pub active: usize,
}

#[derive(Debug, Clone)]
pub struct ActionDraw {
    pub t: usize,
    pub eps: Tensor,
}

/// All stochastic choices for one predicted step's losses. Drawing them
/// up front keeps the loss a pure function of (params, episode, draws),
/// which the sequential-recomputation oracle replays exactly.
#[derive(Debug, Clone)]
pub struct StepDraws {
    pub frame: Vec<FrameDraw>,
    pub action: Vec<ActionDraw>,
}

fn randn_tensor<R: rand::Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    Tensor::randn(rng, shape, 1.0)
}

/// Draw `r` (t, noise) pairs per modality for one step. Both modalities
/// are always drawn, whatever the variant consumes, so a seed produces
/// the same stream for every variant.
pub fn draw_step_noise<R: rand::Rng>(
    cfg: &ModelConfig,
    sched: &Schedule,
    r: usize,
    rng: &mut R,
) -> StepDraws {
    assert!(r >= 1, "at least one draw per step");
    let k_o = cfg.k_obs();
    let mut frame = Vec::with_capacity(r);
    let mut action = Vec::with_capacity(r);
    for _ in 0..r {
        let t = rng.gen_range(1..=sched.t_max);
        let eps = randn_tensor(rng, &[k_o, cfg.d]);
        let sets = detok::frame_set_partition(k_o, cfg.k_sets, rng);
        let active = rng.gen_range(0..sets.len());
        frame.push(FrameDraw { t, eps, sets, active });
        let t = rng.gen_range(1..=sched.t_max);
        let eps = randn_tensor(rng, &[cfg.l, cfg.d_a]);
        action.push(ActionDraw { t, eps });
    }
    StepDraws { frame, action }
}

// ── Training graph ────────────────────────────────────────────────────────

fn pos2d_indices(geom: &PatchGeom) -> (Vec<usize>, Vec<usize>) {
    let (_, gw) = geom.grid();
    let n = geom.n_patches();
    ((0..n).map(|k| k / gw).collect(), (0..n).map(|k| k % gw).collect())
}

/// 2-D additive position matrix (K_O x d) as a graph node.
fn pos2d_graph(g: &mut Graph, cfg: &ModelConfig) -> Var {
    let (ri, ci) = pos2d_indices(&cfg.geom());
    let rows = g.param("tok.pos2d.row");
    let cols = g.param("tok.pos2d.col");
    let r = g.gather_rows(rows, &ri);
    let c = g.gather_rows(cols, &ci);
    g.add(r, c)
}

fn text_rows_graph(g: &mut Graph, cfg: &ModelConfig, task_id: usize) -> Var {
    assert!(task_id < cfg.n_tasks, "task id {task_id} outside vocabulary");
    let table = g.param("tok.text");
    let idx: Vec<usize> = (0..cfg.k_text).map(|j| task_id * cfg.k_text + j).collect();
    g.gather_rows(table, &idx)
}

fn chunk_rows_graph(g: &mut Graph, cfg: &ModelConfig, chunk: &[f32]) -> Var {
    assert_eq!(chunk.len(), cfg.chunk_len(), "chunk length");
    let x = g.input(Tensor::new(&[cfg.l, cfg.d_a], chunk.to_vec()));
    let w1 = g.param("tok.act.w1");
    let b1 = g.param("tok.act.b1");
    let w2 = g.param("tok.act.w2");
    let b2 = g.param("tok.act.b2");
    let h = g.matmul(x, w1);
    let h = g.add_row(h, b1);
    let h = g.gelu(h);
    let out = g.matmul(h, w2);
    g.add_row(out, b2)
}

/// Assemble the embedded sequence [text | frame_0 boa | frame_1 chunk_1
/// | ...] for teacher forcing. Frame tokens enter as data (the codec is
/// frozen); positions, text, boa, and the chunk encoder are parameters.
pub fn embed_sequence_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    task_id: usize,
    frame_tokens: &[Tensor],
    chunks: &[Vec<f32>],
) -> Var {
    assert_eq!(frame_tokens.len(), chunks.len() + 1, "one more frame than chunks");
    let pos = pos2d_graph(g, cfg);
    let mut parts = Vec::with_capacity(1 + 2 * frame_tokens.len());
    parts.push(text_rows_graph(g, cfg, task_id));
    for (n, ft) in frame_tokens.iter().enumerate() {
        assert_eq!(ft.shape, vec![cfg.k_obs(), cfg.d], "frame token shape at step {n}");
        let f = g.input(ft.clone());
        parts.push(g.add(f, pos));
        if n == 0 {
            let boa = g.param("tok.boa");
            parts.push(g.gather_rows(boa, &vec![0; cfg.k_act()]));
        } else {
            parts.push(chunk_rows_graph(g, cfg, &chunks[n - 1]));
        }
    }
    g.concat_rows(&parts)
}

/// Loss nodes for one episode. `steps[i]` covers predicted step `i+1`;
/// absent obs means the variant has no frame prediction.
pub struct LossGraph {
    pub total: Var,
    pub obs: Option<Var>,
    pub act: Var,
    pub steps: Vec<StepLossVars>,
}

pub struct StepLossVars {
    pub step: usize,
    pub obs: Option<Var>,
    pub act: Var,
}

fn take_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(&[idx.len(), c], data)
}

fn mse_graph(g: &mut Graph, pred: Var, target: Var) -> Var {
    let diff = g.sub(pred, target);
    let sq = g.mul(diff, diff);
    g.mean_all(sq)
}

/// Diffusion loss for one frame draw: corrupt the active set's clean
/// tokens, denoise conditioned on Z_O plus the previously generated
/// sets' clean content, and score the noise prediction.
fn frame_draw_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    sched: &Schedule,
    zo: Var,
    target: &Tensor,
    draw: &FrameDraw,
) -> Var {
    let active = &draw.sets[draw.active];
    let generated: Vec<usize> =
        draw.sets[..draw.active].iter().flat_map(|s| s.iter().copied()).collect();
    let x0 = take_rows(target, active);
    let eps = take_rows(&draw.eps, active);
    let xt = Tensor::new(&x0.shape, sched.q_sample(&x0.data, &eps.data, draw.t));
    let xt = g.input(xt);
    let eps_hat =
        frame_denoise_graph(g, &cfg.frame_head(), "fh", xt, draw.t, zo, active, &generated, target);
    let eps_target = g.input(eps);
    mse_graph(g, eps_hat, eps_target)
}

fn action_draw_loss(
    g: &mut Graph,
    cfg: &ModelConfig,
    sched: &Schedule,
    za: Var,
    chunk: &[f32],
    draw: &ActionDraw,
) -> Var {
    let xt = Tensor::new(
        &[cfg.l, cfg.d_a],
        sched.q_sample(chunk, &draw.eps.data, draw.t),
    );
    let xt = g.input(xt);
    let eps_hat = action_denoise_graph(g, &cfg.action_head(), "ah", xt, draw.t, za);
    let eps_target = g.input(draw.eps.clone());
    mse_graph(g, eps_hat, eps_target)
}

fn mean_over_draws(g: &mut Graph, parts: &[Var]) -> Var {
    let s = g.add_n(parts);
    g.scale(s, 1.0 / parts.len() as f32)
}

/// Teacher-forced losses for one episode: one backbone forward, then
/// per predicted step the draw-averaged frame and chunk losses, each a
/// per-element mean, summed over steps with equal weighting.
///
/// `n_real` bounds the steps that contribute loss, so right-padded
/// episodes score only their real transitions. Draws must cover steps
/// `1..=n_real`.
pub fn episode_loss_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    sched: &Schedule,
    ep: &Episode,
    frame_tokens: &[Tensor],
    n_real: usize,
    draws: &[StepDraws],
) -> LossGraph {
    assert_eq!(frame_tokens.len(), ep.n_blocks(), "one token matrix per image");
    assert!(n_real >= 1 && n_real < ep.n_blocks(), "n_real {n_real} outside 1..{}", ep.n_blocks());
    assert_eq!(draws.len(), n_real, "one draw bundle per predicted step");

    let mut steps = Vec::with_capacity(n_real);
    match cfg.variant {
        Variant::Full | Variant::Discrete => {
            let layout = cfg.layout(ep.n_blocks());
            let x = embed_sequence_graph(g, cfg, ep.task_id, frame_tokens, &ep.chunks);
            let mask = g.input(layout.build_mask());
            let out = backbone::forward_graph(g, &cfg.backbone(), x, &layout.rope_positions(), mask);
            for n in 1..=n_real {
                let fr = layout.frame_condition_rows(n);
                let cr = layout.chunk_condition_rows(n);
                let zo = g.slice_rows(out, fr.start, fr.end);
                let za = g.slice_rows(out, cr.start, cr.end);
                let fd: Vec<Var> = draws[n - 1]
                    .frame
                    .iter()
                    .map(|d| frame_draw_loss(g, cfg, sched, zo, &frame_tokens[n], d))
                    .collect();
                let obs = mean_over_draws(g, &fd);
                let act = match cfg.variant {
                    Variant::Discrete => {
                        let pred = regressor_graph(g, &cfg.regressor(), "dh", za);
                        let target =
                            g.input(Tensor::new(&[cfg.l, cfg.d_a], ep.chunks[n - 1].clone()));
                        mse_graph(g, pred, target)
                    }
                    _ => {
                        let ad: Vec<Var> = draws[n - 1]
                            .action
                            .iter()
                            .map(|d| action_draw_loss(g, cfg, sched, za, &ep.chunks[n - 1], d))
                            .collect();
                        mean_over_draws(g, &ad)
                    }
                };
                steps.push(StepLossVars { step: n, obs: Some(obs), act });
            }
        }
        Variant::NoAr => {
            // No history: the chunk head conditions on the embedded text
            // and the frame the chunk was executed from.
            let pos = pos2d_graph(g, cfg);
            let text = text_rows_graph(g, cfg, ep.task_id);
            for n in 1..=n_real {
                let f = g.input(frame_tokens[n - 1].clone());
                let f = g.add(f, pos);
                let cond = g.concat_rows(&[text, f]);
                let ad: Vec<Var> = draws[n - 1]
                    .action
                    .iter()
                    .map(|d| action_draw_loss(g, cfg, sched, cond, &ep.chunks[n - 1], d))
                    .collect();
                let act = mean_over_draws(g, &ad);
                steps.push(StepLossVars { step: n, obs: None, act });
            }
        }
    }

    let act_parts: Vec<Var> = steps.iter().map(|s| s.act).collect();
    let act = g.add_n(&act_parts);
    let obs_parts: Vec<Var> = steps.iter().filter_map(|s| s.obs).collect();
    let obs = if obs_parts.is_empty() { None } else { Some(g.add_n(&obs_parts)) };
    let total = match obs {
        Some(o) => g.add(o, act),
        None => act,
    };
    LossGraph { total, obs, act, steps }
}

// ── Plain embedding twins (inference path) ────────────────────────────────

/// 2-D additive position matrix, computed with the same element order
/// as the graph path so cached inference stays bit-identical to it.
pub fn pos2d_plain(store: &ParamStore, cfg: &ModelConfig) -> Tensor {
    let (ri, ci) = pos2d_indices(&cfg.geom());
    let rows = store.tensor(store.index_of("tok.pos2d.row"));
    let cols = store.tensor(store.index_of("tok.pos2d.col"));
    let d = cfg.d;
    let mut data = Vec::with_capacity(ri.len() * d);
    for k in 0..ri.len() {
        let r = rows.row(ri[k]);
        let c = cols.row(ci[k]);
        data.extend(r.iter().zip(c).map(|(a, b)| a + b));
    }
    Tensor::new(&[ri.len(), d], data)
}

pub fn text_rows_plain(store: &ParamStore, cfg: &ModelConfig, task_id: usize) -> Tensor {
    assert!(task_id < cfg.n_tasks, "task id {task_id} outside vocabulary");
    let table = store.tensor(store.index_of("tok.text"));
    let mut data = Vec::with_capacity(cfg.k_text * cfg.d);
    for j in 0..cfg.k_text {
        data.extend_from_slice(table.row(task_id * cfg.k_text + j));
    }
    Tensor::new(&[cfg.k_text, cfg.d], data)
}

/// Frame tokens plus the 2-D position matrix.
pub fn embed_frame_plain(cfg: &ModelConfig, tokens: &Tensor, pos: &Tensor) -> Tensor {
    assert_eq!(tokens.shape, vec![cfg.k_obs(), cfg.d], "frame token shape");
    let data = tokens.data.iter().zip(&pos.data).map(|(a, b)| a + b).collect();
    Tensor::new(&tokens.shape, data)
}

pub fn boa_rows_plain(store: &ParamStore, cfg: &ModelConfig) -> Tensor {
    let boa = store.tensor(store.index_of("tok.boa"));
    let mut data = Vec::with_capacity(cfg.k_act() * cfg.d);
    for _ in 0..cfg.k_act() {
        data.extend_from_slice(boa.row(0));
    }
    Tensor::new(&[cfg.k_act(), cfg.d], data)
}

/// Chunk-encoder twin of the graph path, same kernels in the same order.
pub fn embed_chunk_plain(store: &ParamStore, cfg: &ModelConfig, chunk: &[f32]) -> Tensor {
    assert_eq!(chunk.len(), cfg.chunk_len(), "chunk length");
    let t = |name: &str| store.tensor(store.index_of(name));
    let (w1, b1, w2, b2) = (t("tok.act.w1"), t("tok.act.b1"), t("tok.act.w2"), t("tok.act.b2"));
    let d = cfg.d;
    let mut h = vec![0.0f32; cfg.l * d];
    kernels::matmul(&mut h, chunk, &w1.data, cfg.l, cfg.d_a, d);
    for r in 0..cfg.l {
        for j in 0..d {
            h[r * d + j] += b1.data[j];
        }
    }
    for v in h.iter_mut() {
        *v = kernels::gelu(*v);
    }
    let mut out = vec![0.0f32; cfg.l * d];
    kernels::matmul(&mut out, &h, &w2.data, cfg.l, d, d);
    for r in 0..cfg.l {
        for j in 0..d {
            out[r * d + j] += b2.data[j];
        }
    }
    Tensor::new(&[cfg.l, d], out)
}

// ── Closed-loop decoding ──────────────────────────────────────────────────

/// KV-cached decoding driver for one rollout.
///
/// Per step: `imagine` samples the next frame's tokens from the output
/// tail of the committed context; `chunk_for_frame` appends that frame,
/// reads the chunk conditioning off its processed tokens, samples or
/// regresses a chunk, and rolls the cache back, so the sampled frame
/// never outlives its own step. `commit` then appends the real
/// observation and the executed chunk. Committed context therefore
/// always holds real observations only.
pub struct ClosedLoop<'a> {
    store: &'a ParamStore,
    cfg: &'a ModelConfig,
    sched: Schedule,
    layout: SeqLayout,
    cache: KvCache,
    pos: Tensor,
    /// Backbone outputs at the last `k_obs` committed positions.
    tail_out: Tensor,
    /// Codec tokens of the last committed observation.
    last_frame: Tensor,
    task_id: usize,
    committed: usize,
}

impl<'a> ClosedLoop<'a> {
    /// `capacity_blocks` bounds how many physical steps fit in context.
    pub fn new(store: &'a ParamStore, cfg: &'a ModelConfig, capacity_blocks: usize) -> Self {
        assert!(capacity_blocks >= 2, "capacity below one predicted step");
        ClosedLoop {
            store,
            cfg,
            sched: cfg.schedule(),
            layout: cfg.layout(capacity_blocks),
            cache: KvCache::new(&cfg.backbone()),
            pos: pos2d_plain(store, cfg),
            tail_out: Tensor::zeros(&[1, 1]),
            last_frame: Tensor::zeros(&[1, 1]),
            task_id: 0,
            committed: 0,
        }
    }

    pub fn capacity_blocks(&self) -> usize {
        self.layout.n_steps
    }

    pub fn committed_blocks(&self) -> usize {
        self.committed
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Tokens of the most recently committed observation.
    pub fn last_frame_tokens(&self) -> &Tensor {
        &self.last_frame
    }

    /// Backbone outputs at the last `k_obs` committed positions: the
    /// conditioning the next frame prediction reads.
    pub fn tail_outputs(&self) -> &Tensor {
        &self.tail_out
    }

    fn encode_image(&self, image: &[f32]) -> Tensor {
        let w_enc = self.store.tensor(self.store.index_of("tok.patch.w"));
        encode_frame(&self.cfg.geom(), image, w_enc)
    }

    /// Enter the initial context: text, the reset observation, and the
    /// begin-of-action placeholder.
    pub fn begin(&mut self, task_id: usize, image: &[f32]) {
        assert_eq!(self.committed, 0, "begin on a used context");
        let tokens = self.encode_image(image);
        self.last_frame = tokens.clone();
        self.task_id = task_id;
        if !self.cfg.variant.has_backbone() {
            self.committed = 1;
            return;
        }
        let mut parts = text_rows_plain(self.store, self.cfg, task_id);
        let frame = embed_frame_plain(self.cfg, &tokens, &self.pos);
        let boa = boa_rows_plain(self.store, self.cfg);
        parts.append_rows(&frame);
        parts.append_rows(&boa);
        let out =
            backbone::forward_append(self.store, &self.cfg.backbone(), &self.layout, &mut self.cache, &parts);
        self.tail_out = tail_rows(&out, self.cfg.k_obs());
        self.committed = 1;
    }

    /// Sample the next frame's tokens from the committed context. The
    /// cache is not touched.
    pub fn imagine<R: rand::Rng>(&mut self, rng: &mut R) -> Tensor {
        assert!(self.cfg.variant.has_frame_head(), "variant has no frame head");
        assert!(self.committed >= 1, "imagine before begin");
        assert!(self.committed < self.capacity_blocks(), "context full");
        detok::sample_frame(
            self.store,
            &self.cfg.frame_head(),
            "fh",
            &self.sched,
            self.cfg.t_infer,
            self.cfg.k_sets,
            &self.tail_out,
            rng,
        )
    }

    /// Append `frame_tokens` at the next frame block, return the chunk
    /// conditioning read off its processed tail, and roll the cache
    /// back so the appended frame leaves no residue.
    pub fn action_condition(&mut self, frame_tokens: &Tensor) -> Tensor {
        assert!(self.committed >= 1, "condition before begin");
        assert!(self.committed < self.capacity_blocks(), "context full");
        let n = self.committed;
        let start = self.layout.frame_range(n).start;
        assert_eq!(self.cache.len(), start, "cache out of phase with committed blocks");
        let x = embed_frame_plain(self.cfg, frame_tokens, &self.pos);
        let out =
            backbone::forward_append(self.store, &self.cfg.backbone(), &self.layout, &mut self.cache, &x);
        self.cache.truncate(start);
        tail_rows(&out, self.cfg.k_act())
    }

    /// Produce this step's chunk: imagined frame (if the variant
    /// predicts frames) and the executed-to-be chunk in [-1,1].
    pub fn step<R: rand::Rng>(&mut self, rng: &mut R) -> (Option<Tensor>, Tensor) {
        match self.cfg.variant {
            Variant::NoAr => {
                let mut cond = text_rows_plain(self.store, self.cfg, self.task_id);
                cond.append_rows(&embed_frame_plain(self.cfg, &self.last_frame, &self.pos));
                let chunk = detok::sample_action_chunk(
                    self.store,
                    &self.cfg.action_head(),
                    "ah",
                    &self.sched,
                    self.cfg.t_infer,
                    &cond,
                    rng,
                );
                (None, chunk)
            }
            Variant::Full => {
                let frame = self.imagine(rng);
                let za = self.action_condition(&frame);
                let chunk = detok::sample_action_chunk(
                    self.store,
                    &self.cfg.action_head(),
                    "ah",
                    &self.sched,
                    self.cfg.t_infer,
                    &za,
                    rng,
                );
                (Some(frame), chunk)
            }
            Variant::Discrete => {
                let frame = self.imagine(rng);
                let za = self.action_condition(&frame);
                let chunk = detok::regressor_predict(self.store, &self.cfg.regressor(), "dh", &za);
                (Some(frame), chunk)
            }
        }
    }

    /// Append the real observation and the chunk that produced it.
    pub fn commit(&mut self, image: &[f32], chunk: &[f32]) {
        assert!(self.committed >= 1, "commit before begin");
        assert!(self.committed < self.capacity_blocks(), "context full");
        let tokens = self.encode_image(image);
        self.last_frame = tokens.clone();
        if !self.cfg.variant.has_backbone() {
            self.committed += 1;
            return;
        }
        let n = self.committed;
        assert_eq!(self.cache.len(), self.layout.frame_range(n).start, "uncommitted residue");
        let mut x = embed_frame_plain(self.cfg, &tokens, &self.pos);
        let a = embed_chunk_plain(self.store, self.cfg, chunk);
        x.append_rows(&a);
        let out =
            backbone::forward_append(self.store, &self.cfg.backbone(), &self.layout, &mut self.cache, &x);
        self.tail_out = tail_rows(&out, self.cfg.k_obs());
        self.committed += 1;
    }
}

fn tail_rows(t: &Tensor, k: usize) -> Tensor {
    let r = t.rows();
    assert!(k <= r, "tail of {k} from {r} rows");
    take_rows(t, &(r - k..r).collect::<Vec<_>>())
}
