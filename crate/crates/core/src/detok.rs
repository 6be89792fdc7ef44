//! Denoising heads that turn backbone features back into signals.
//!
//! Both modalities decode through conditional diffusion: given
//! conditioning rows from the backbone and a timestep, a small network
//! predicts the noise in a corrupted target.
//!
//! The action head is a miniature DiT: noisy chunk slots are projected
//! to the block width, the timestep embedding is added, and a stack of
//! blocks applies self-attention across slots, cross-attention with the
//! conditioning rows as keys and values, and an MLP. Cross-attention
//! accepts any number of conditioning rows, so variants that condition
//! on a different slice of the sequence need no architectural change.
//! Denoising is joint over the chunk; per-slot denoising would let each
//! slot pick a different mode of a multimodal chunk distribution and
//! emit an incoherent mixture.
//!
//! The frame head generates a frame's tokens set by set: a random
//! partition of the token indices is sampled, and each set runs a full
//! reverse chain conditioned on the clean content of every previously
//! completed set. Per token the head is a three-layer MLP over
//! [content | conditioning row | timestep embedding | role flag], with
//! one bidirectional attention layer mixing the visible tokens. Tokens
//! outside the active and completed sets are absent entirely.
//!
//! The regressor head is the deliberately weaker ablation: a two-layer
//! perceptron from the flattened conditioning straight to a chunk,
//! trained with squared error. Where the chunk distribution is
//! multimodal it must average the modes; the probes pin that contrast.
//!
//! Every head has a graph path (training) and a plain path (sampling)
//! running identical arithmetic; tests assert bitwise agreement.

use crate::graph::{Graph, Var};
use crate::optim::ParamStore;
use crate::schedule::{timestep_embedding, Schedule};
use crate::tensor::{kernels, Tensor};

/// Width of the timestep embedding concatenated into frame-head inputs.
pub const FRAME_TEMB_DIM: usize = 32;
pub const TEMB_MAX_PERIOD: f32 = 10000.0;

/// Action chunk denoiser: `blocks` rounds of {self-attention over the
/// chunk's slots, cross-attention into the conditioning rows, MLP} at
/// `width`, timestep embedding added after the input projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionDitCfg {
    pub l: usize,
    pub d_a: usize,
    pub d_cond: usize,
    pub width: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
}

impl ActionDitCfg {
    pub fn chunk_dim(&self) -> usize {
        self.l * self.d_a
    }
}

/// Frame-token denoiser geometry. `d_z` is the token width, `d_cond`
/// the backbone width; one conditioning row per token. `attn_dim` is
/// the inner width of the single mixing attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeadCfg {
    pub d_z: usize,
    pub d_cond: usize,
    pub hidden: usize,
    pub attn_dim: usize,
}

impl FrameHeadCfg {
    /// [content | conditioning | timestep | active/completed flag]
    fn in_dim(&self) -> usize {
        self.d_z + self.d_cond + FRAME_TEMB_DIM + 2
    }
}

/// Chunk regressor geometry: flattened conditioning in, chunk out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegressorCfg {
    pub l: usize,
    pub d_a: usize,
    pub n_cond: usize,
    pub d_cond: usize,
    pub hidden: usize,
}

impl RegressorCfg {
    pub fn chunk_dim(&self) -> usize {
        self.l * self.d_a
    }

    fn in_dim(&self) -> usize {
        self.n_cond * self.d_cond
    }
}

/// Residual output projections and final output layers start at zero:
/// an untrained head is the zero function, so the first optimizer steps
/// see bounded losses instead of amplified random predictions.
pub fn register_action_dit_params<R: rand::Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &ActionDitCfg,
    prefix: &str,
) {
    let w = cfg.width;
    let std = 1.0 / (w as f32).sqrt();
    let randn = |shape: &[usize], s: f32, rng: &mut R| Tensor::randn(rng, shape, s);
    store.insert(&format!("{prefix}.inp.w"), randn(&[cfg.d_a, w], std, rng), true);
    store.insert(&format!("{prefix}.inp.b"), Tensor::zeros(&[w]), true);
    store.insert(&format!("{prefix}.slot"), randn(&[cfg.l, w], 0.02, rng), true);
    for b in 0..cfg.blocks {
        let p = format!("{prefix}.blk{b}");
        store.insert(&format!("{p}.ln1.g"), Tensor::ones(&[w]), true);
        store.insert(&format!("{p}.ln1.b"), Tensor::zeros(&[w]), true);
        store.insert(&format!("{p}.self.wq"), randn(&[w, w], std, rng), true);
        store.insert(&format!("{p}.self.wk"), randn(&[w, w], std, rng), true);
        store.insert(&format!("{p}.self.wv"), randn(&[w, w], std, rng), true);
        store.insert(&format!("{p}.self.wo"), Tensor::zeros(&[w, w]), true);
        store.insert(&format!("{p}.ln2.g"), Tensor::ones(&[w]), true);
        store.insert(&format!("{p}.ln2.b"), Tensor::zeros(&[w]), true);
        store.insert(
            &format!("{p}.cross.wq"),
            randn(&[w, w], std, rng),
            true,
        );
        let cstd = 1.0 / (cfg.d_cond as f32).sqrt();
        store.insert(&format!("{p}.cross.wk"), randn(&[cfg.d_cond, w], cstd, rng), true);
        store.insert(&format!("{p}.cross.wv"), randn(&[cfg.d_cond, w], cstd, rng), true);
        store.insert(&format!("{p}.cross.wo"), Tensor::zeros(&[w, w]), true);
        store.insert(&format!("{p}.ln3.g"), Tensor::ones(&[w]), true);
        store.insert(&format!("{p}.ln3.b"), Tensor::zeros(&[w]), true);
        let h = w * cfg.mlp_ratio;
        store.insert(&format!("{p}.mlp.w1"), randn(&[w, h], std, rng), true);
        store.insert(&format!("{p}.mlp.b1"), Tensor::zeros(&[h]), true);
        store.insert(&format!("{p}.mlp.w2"), Tensor::zeros(&[h, w]), true);
        store.insert(&format!("{p}.mlp.b2"), Tensor::zeros(&[w]), true);
    }
    store.insert(&format!("{prefix}.lnf.g"), Tensor::ones(&[w]), true);
    store.insert(&format!("{prefix}.lnf.b"), Tensor::zeros(&[w]), true);
    store.insert(&format!("{prefix}.out.w"), Tensor::zeros(&[w, cfg.d_a]), true);
    store.insert(&format!("{prefix}.out.b"), Tensor::zeros(&[cfg.d_a]), true);
}

pub fn register_frame_head_params<R: rand::Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &FrameHeadCfg,
    prefix: &str,
) {
    let std1 = 1.0 / (cfg.in_dim() as f32).sqrt();
    let stdh = 1.0 / (cfg.hidden as f32).sqrt();
    store.insert(&format!("{prefix}.w1"), Tensor::randn(rng, &[cfg.in_dim(), cfg.hidden], std1), true);
    store.insert(&format!("{prefix}.b1"), Tensor::zeros(&[cfg.hidden]), true);
    store.insert(&format!("{prefix}.attn.wq"), Tensor::randn(rng, &[cfg.hidden, cfg.attn_dim], stdh), true);
    store.insert(&format!("{prefix}.attn.wk"), Tensor::randn(rng, &[cfg.hidden, cfg.attn_dim], stdh), true);
    store.insert(&format!("{prefix}.attn.wv"), Tensor::randn(rng, &[cfg.hidden, cfg.attn_dim], stdh), true);
    store.insert(&format!("{prefix}.attn.wo"), Tensor::zeros(&[cfg.attn_dim, cfg.hidden]), true);
    store.insert(&format!("{prefix}.w2"), Tensor::randn(rng, &[cfg.hidden, cfg.hidden], stdh), true);
    store.insert(&format!("{prefix}.b2"), Tensor::zeros(&[cfg.hidden]), true);
    store.insert(&format!("{prefix}.w3"), Tensor::zeros(&[cfg.hidden, cfg.d_z]), true);
    store.insert(&format!("{prefix}.b3"), Tensor::zeros(&[cfg.d_z]), true);
}

pub fn register_regressor_params<R: rand::Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &RegressorCfg,
    prefix: &str,
) {
    let std = 1.0 / (cfg.in_dim() as f32).sqrt();
    store.insert(&format!("{prefix}.w1"), Tensor::randn(rng, &[cfg.in_dim(), cfg.hidden], std), true);
    store.insert(&format!("{prefix}.b1"), Tensor::zeros(&[cfg.hidden]), true);
    store.insert(&format!("{prefix}.w2"), Tensor::zeros(&[cfg.hidden, cfg.chunk_dim()]), true);
    store.insert(&format!("{prefix}.b2"), Tensor::zeros(&[cfg.chunk_dim()]), true);
}

pub fn action_dit_param_count(cfg: &ActionDitCfg) -> usize {
    let w = cfg.width;
    let h = w * cfg.mlp_ratio;
    let block = 6 * w          // three layernorm gain/bias pairs
        + 4 * w * w            // self attention
        + w * w + 2 * cfg.d_cond * w + w * w  // cross attention
        + w * h + h + h * w + w; // mlp
    cfg.d_a * w + w            // input projection
        + cfg.l * w            // slot embedding
        + cfg.blocks * block
        + 2 * w                // final norm
        + w * cfg.d_a + cfg.d_a // output projection
}

pub fn frame_head_param_count(cfg: &FrameHeadCfg) -> usize {
    cfg.in_dim() * cfg.hidden + cfg.hidden
        + 3 * cfg.hidden * cfg.attn_dim + cfg.attn_dim * cfg.hidden
        + cfg.hidden * cfg.hidden + cfg.hidden
        + cfg.hidden * cfg.d_z + cfg.d_z
}

pub fn regressor_param_count(cfg: &RegressorCfg) -> usize {
    cfg.in_dim() * cfg.hidden + cfg.hidden + cfg.hidden * cfg.chunk_dim() + cfg.chunk_dim()
}

fn temb_tensor(t: usize, dim: usize) -> Tensor {
    let e = timestep_embedding(t, dim, TEMB_MAX_PERIOD);
    Tensor::new(&[1, dim], e.data)
}

/// Bidirectional single-head attention used inside both heads, graph
/// path. `q_src` rows attend over `kv_src` rows, output is projected by
/// `wo` and must be residually added by the caller.
fn attention_graph(g: &mut Graph, q_src: Var, kv_src: Var, wq: Var, wk: Var, wv: Var, wo: Var) -> Var {
    let dim = g.value(wq).cols();
    let q = g.matmul(q_src, wq);
    let k = g.matmul(kv_src, wk);
    let v = g.matmul(kv_src, wv);
    let kt = g.transpose(k);
    let scores = g.matmul(q, kt);
    let scaled = g.scale(scores, 1.0 / (dim as f32).sqrt());
    let attn = g.softmax_rows(scaled);
    let ctx = g.matmul(attn, v);
    g.matmul(ctx, wo)
}

/// Plain twin of `attention_graph`; same kernels, same accumulation
/// order, bitwise-equal outputs.
fn attention_plain(
    q_src: &Tensor,
    kv_src: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
) -> Tensor {
    let (m, dq) = (q_src.rows(), q_src.cols());
    let (n, dk) = (kv_src.rows(), kv_src.cols());
    let dim = wq.cols();
    let mut q = vec![0.0f32; m * dim];
    kernels::matmul(&mut q, &q_src.data, &wq.data, m, dq, dim);
    let mut k = vec![0.0f32; n * dim];
    kernels::matmul(&mut k, &kv_src.data, &wk.data, n, dk, dim);
    let mut v = vec![0.0f32; n * dim];
    kernels::matmul(&mut v, &kv_src.data, &wv.data, n, dk, dim);
    // Scores through an explicit transpose so the inner summation order
    // matches the graph path bit for bit.
    let mut kt = vec![0.0f32; dim * n];
    for r in 0..n {
        for c in 0..dim {
            kt[c * n + r] = k[r * dim + c];
        }
    }
    let mut scores = vec![0.0f32; m * n];
    kernels::matmul(&mut scores, &q, &kt, m, dim, n);
    let scale = 1.0 / (dim as f32).sqrt();
    for s in scores.iter_mut() {
        *s *= scale;
    }
    kernels::softmax_rows(&mut scores, m, n);
    let mut ctx = vec![0.0f32; m * dim];
    kernels::matmul(&mut ctx, &scores, &v, m, n, dim);
    let d_out = wo.cols();
    let mut out = vec![0.0f32; m * d_out];
    kernels::matmul(&mut out, &ctx, &wo.data, m, dim, d_out);
    Tensor::new(&[m, d_out], out)
}

/// Predicted noise for a noisy chunk `xt` (l, d_a) given conditioning
/// rows `cond` (any count, d_cond), training path. Gradient flows into
/// `cond`, so the backbone trains through this head.
pub fn action_denoise_graph(
    g: &mut Graph,
    cfg: &ActionDitCfg,
    prefix: &str,
    xt: Var,
    t: usize,
    cond: Var,
) -> Var {
    assert_eq!(g.value(xt).shape, vec![cfg.l, cfg.d_a], "chunk shape");
    assert_eq!(g.value(cond).cols(), cfg.d_cond, "conditioning width");
    let p = |g: &mut Graph, s: &str| g.param(&format!("{prefix}.{s}"));
    let w_in = p(g, "inp.w");
    let b_in = p(g, "inp.b");
    let mut h = g.matmul(xt, w_in);
    h = g.add_row(h, b_in);
    let slot = p(g, "slot");
    h = g.add(h, slot);
    let temb = g.input(temb_tensor(t, cfg.width));
    let temb_rows = g.gather_rows(temb, &vec![0; cfg.l]);
    h = g.add(h, temb_rows);
    for b in 0..cfg.blocks {
        let pb = |g: &mut Graph, s: &str| g.param(&format!("{prefix}.blk{b}.{s}"));
        let (g1, b1) = (pb(g, "ln1.g"), pb(g, "ln1.b"));
        let hn = g.layernorm(h, g1, b1);
        let (wq, wk, wv, wo) =
            (pb(g, "self.wq"), pb(g, "self.wk"), pb(g, "self.wv"), pb(g, "self.wo"));
        let a = attention_graph(g, hn, hn, wq, wk, wv, wo);
        h = g.add(h, a);
        let (g2, b2) = (pb(g, "ln2.g"), pb(g, "ln2.b"));
        let hn = g.layernorm(h, g2, b2);
        let (wq, wk, wv, wo) =
            (pb(g, "cross.wq"), pb(g, "cross.wk"), pb(g, "cross.wv"), pb(g, "cross.wo"));
        let a = attention_graph(g, hn, cond, wq, wk, wv, wo);
        h = g.add(h, a);
        let (g3, b3) = (pb(g, "ln3.g"), pb(g, "ln3.b"));
        let hn = g.layernorm(h, g3, b3);
        let (w1, bb1, w2, bb2) =
            (pb(g, "mlp.w1"), pb(g, "mlp.b1"), pb(g, "mlp.w2"), pb(g, "mlp.b2"));
        let m = g.matmul(hn, w1);
        let m = g.add_row(m, bb1);
        let m = g.gelu(m);
        let m = g.matmul(m, w2);
        let m = g.add_row(m, bb2);
        h = g.add(h, m);
    }
    let (gf, bf) = (p(g, "lnf.g"), p(g, "lnf.b"));
    let hn = g.layernorm(h, gf, bf);
    let (wo, bo) = (p(g, "out.w"), p(g, "out.b"));
    let out = g.matmul(hn, wo);
    g.add_row(out, bo)
}

/// Plain twin of `action_denoise_graph` for sampling.
pub fn action_denoise_plain(
    store: &ParamStore,
    cfg: &ActionDitCfg,
    prefix: &str,
    xt: &Tensor,
    t: usize,
    cond: &Tensor,
) -> Tensor {
    assert_eq!(xt.shape, vec![cfg.l, cfg.d_a], "chunk shape");
    assert_eq!(cond.cols(), cfg.d_cond, "conditioning width");
    let p = |s: &str| store.tensor(store.index_of(&format!("{prefix}.{s}")));
    let w = cfg.width;
    let l = cfg.l;
    let mut h = vec![0.0f32; l * w];
    kernels::matmul(&mut h, &xt.data, &p("inp.w").data, l, cfg.d_a, w);
    let b_in = &p("inp.b").data;
    let slot = &p("slot").data;
    let temb = timestep_embedding(t, w, TEMB_MAX_PERIOD);
    // Three separate additions, matching the graph path's op order so
    // the rounding is identical.
    for r in 0..l {
        for j in 0..w {
            let cell = &mut h[r * w + j];
            *cell += b_in[j];
            *cell += slot[r * w + j];
            *cell += temb.data[j];
        }
    }
    let ln = |x: &[f32], gain: &Tensor, bias: &Tensor, rows: usize| {
        let mut out = vec![0.0f32; rows * w];
        let mut xhat = vec![0.0f32; rows * w];
        let mut inv_std = vec![0.0f32; rows];
        kernels::layernorm_rows(&mut out, &mut xhat, &mut inv_std, x, &gain.data, &bias.data, rows, w);
        out
    };
    for b in 0..cfg.blocks {
        let pb = |s: &str| p(&format!("blk{b}.{s}"));
        let hn = ln(&h, pb("ln1.g"), pb("ln1.b"), l);
        let hn_t = Tensor::new(&[l, w], hn);
        let a = attention_plain(&hn_t, &hn_t, pb("self.wq"), pb("self.wk"), pb("self.wv"), pb("self.wo"));
        for (x, y) in h.iter_mut().zip(&a.data) {
            *x += y;
        }
        let hn = ln(&h, pb("ln2.g"), pb("ln2.b"), l);
        let hn_t = Tensor::new(&[l, w], hn);
        let a = attention_plain(&hn_t, cond, pb("cross.wq"), pb("cross.wk"), pb("cross.wv"), pb("cross.wo"));
        for (x, y) in h.iter_mut().zip(&a.data) {
            *x += y;
        }
        let hn = ln(&h, pb("ln3.g"), pb("ln3.b"), l);
        let hdim = w * cfg.mlp_ratio;
        let mut m = vec![0.0f32; l * hdim];
        kernels::matmul(&mut m, &hn, &pb("mlp.w1").data, l, w, hdim);
        let b1 = &pb("mlp.b1").data;
        for r in 0..l {
            for j in 0..hdim {
                let cell = &mut m[r * hdim + j];
                *cell = kernels::gelu(*cell + b1[j]);
            }
        }
        let mut m2 = vec![0.0f32; l * w];
        kernels::matmul(&mut m2, &m, &pb("mlp.w2").data, l, hdim, w);
        let b2 = &pb("mlp.b2").data;
        for r in 0..l {
            for j in 0..w {
                h[r * w + j] += m2[r * w + j] + b2[j];
            }
        }
    }
    let hn = ln(&h, p("lnf.g"), p("lnf.b"), l);
    let mut out = vec![0.0f32; l * cfg.d_a];
    kernels::matmul(&mut out, &hn, &p("out.w").data, l, w, cfg.d_a);
    let bo = &p("out.b").data;
    for r in 0..l {
        for j in 0..cfg.d_a {
            out[r * cfg.d_a + j] += bo[j];
        }
    }
    Tensor::new(&[cfg.l, cfg.d_a], out)
}

/// Random partition of `0..k_o` into `k` disjoint near-equal index
/// sets covering all indices; generation order is the list order.
pub fn frame_set_partition<R: rand::Rng>(k_o: usize, k: usize, rng: &mut R) -> Vec<Vec<usize>> {
    assert!(k >= 1 && k <= k_o, "set count {k} outside 1..={k_o}");
    let mut idx: Vec<usize> = (0..k_o).collect();
    for i in (1..k_o).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    // First (k_o mod k) sets take the extra element.
    let base = k_o / k;
    let extra = k_o % k;
    let mut sets = Vec::with_capacity(k);
    let mut at = 0;
    for s in 0..k {
        let take = base + usize::from(s < extra);
        sets.push(idx[at..at + take].to_vec());
        at += take;
    }
    sets
}

fn check_sets(k_o: usize, active: &[usize], generated: &[usize]) {
    for &i in active.iter().chain(generated) {
        assert!(i < k_o, "token index {i} outside frame of {k_o}");
    }
    for &a in active {
        assert!(!generated.contains(&a), "active set overlaps generated sets at token {a}");
    }
}

/// Per-token input rows for the frame head: visible tokens are the
/// generated sets (clean content, flag 01) followed by the active set
/// (noisy content, flag 10), each with its own conditioning row.
fn frame_in_rows(
    cfg: &FrameHeadCfg,
    x_active: &Tensor,
    t: usize,
    cond: &Tensor,
    active: &[usize],
    generated: &[usize],
    clean: &Tensor,
) -> Tensor {
    let temb = timestep_embedding(t, FRAME_TEMB_DIM, TEMB_MAX_PERIOD);
    let n = generated.len() + active.len();
    let d = cfg.in_dim();
    let mut rows = vec![0.0f32; n * d];
    for (r, &tok) in generated.iter().chain(active.iter()).enumerate() {
        let is_active = r >= generated.len();
        let row = &mut rows[r * d..(r + 1) * d];
        let content = if is_active {
            x_active.row(r - generated.len())
        } else {
            clean.row(tok)
        };
        row[..cfg.d_z].copy_from_slice(content);
        row[cfg.d_z..cfg.d_z + cfg.d_cond].copy_from_slice(cond.row(tok));
        row[cfg.d_z + cfg.d_cond..cfg.d_z + cfg.d_cond + FRAME_TEMB_DIM]
            .copy_from_slice(&temb.data);
        row[d - 2] = if is_active { 1.0 } else { 0.0 };
        row[d - 1] = if is_active { 0.0 } else { 1.0 };
    }
    Tensor::new(&[n, d], rows)
}

/// Predicted noise for the active set's noisy tokens `x_active`
/// (|active|, d_z), conditioned on each token's conditioning row, the
/// clean tokens of previously generated sets, and the timestep,
/// training path. Gradient flows into `cond`.
///
/// The content and flag features are assembled outside the graph; only
/// the conditioning columns are graph inputs, which keeps the gradient
/// path into the backbone while the clean set content stays data.
#[allow(clippy::too_many_arguments)]
pub fn frame_denoise_graph(
    g: &mut Graph,
    cfg: &FrameHeadCfg,
    prefix: &str,
    x_active: Var,
    t: usize,
    cond: Var,
    active: &[usize],
    generated: &[usize],
    clean: &Tensor,
) -> Var {
    let k_o = g.value(cond).rows();
    check_sets(k_o, active, generated);
    assert_eq!(g.value(x_active).shape, vec![active.len(), cfg.d_z], "active noisy shape");
    assert_eq!(g.value(cond).cols(), cfg.d_cond, "conditioning width");
    assert_eq!(clean.cols(), cfg.d_z, "clean token width");
    let n_gen = generated.len();
    let n = n_gen + active.len();

    // Non-conditioning columns: clean content for generated rows, zeros
    // at active rows (filled by concat below), temb, flags.
    let temb = timestep_embedding(t, FRAME_TEMB_DIM, TEMB_MAX_PERIOD);
    let tail_w = FRAME_TEMB_DIM + 2;
    let mut tail = vec![0.0f32; n * tail_w];
    for r in 0..n {
        let row = &mut tail[r * tail_w..(r + 1) * tail_w];
        row[..FRAME_TEMB_DIM].copy_from_slice(&temb.data);
        row[FRAME_TEMB_DIM] = if r >= n_gen { 1.0 } else { 0.0 };
        row[FRAME_TEMB_DIM + 1] = if r >= n_gen { 0.0 } else { 1.0 };
    }
    let tail = g.input(Tensor::new(&[n, tail_w], tail));

    let content = if n_gen > 0 {
        let mut gen_rows = vec![0.0f32; n_gen * cfg.d_z];
        for (r, &tok) in generated.iter().enumerate() {
            gen_rows[r * cfg.d_z..(r + 1) * cfg.d_z].copy_from_slice(clean.row(tok));
        }
        let gen = g.input(Tensor::new(&[n_gen, cfg.d_z], gen_rows));
        g.concat_rows(&[gen, x_active])
    } else {
        x_active
    };
    let order: Vec<usize> = generated.iter().chain(active.iter()).copied().collect();
    let cond_rows = g.gather_rows(cond, &order);
    let cat = g.concat_cols(&[content, cond_rows, tail]);

    let p = |g: &mut Graph, s: &str| g.param(&format!("{prefix}.{s}"));
    let (w1, b1) = (p(g, "w1"), p(g, "b1"));
    let mut h = g.matmul(cat, w1);
    h = g.add_row(h, b1);
    h = g.gelu(h);
    let (wq, wk, wv, wo) = (p(g, "attn.wq"), p(g, "attn.wk"), p(g, "attn.wv"), p(g, "attn.wo"));
    let a = attention_graph(g, h, h, wq, wk, wv, wo);
    h = g.add(h, a);
    let (w2, b2) = (p(g, "w2"), p(g, "b2"));
    let mut h2 = g.matmul(h, w2);
    h2 = g.add_row(h2, b2);
    h2 = g.gelu(h2);
    let (w3, b3) = (p(g, "w3"), p(g, "b3"));
    let out = g.matmul(h2, w3);
    let out = g.add_row(out, b3);
    g.slice_rows(out, n_gen, n)
}

/// Plain twin of `frame_denoise_graph` for sampling.
#[allow(clippy::too_many_arguments)]
pub fn frame_denoise_plain(
    store: &ParamStore,
    cfg: &FrameHeadCfg,
    prefix: &str,
    x_active: &Tensor,
    t: usize,
    cond: &Tensor,
    active: &[usize],
    generated: &[usize],
    clean: &Tensor,
) -> Tensor {
    check_sets(cond.rows(), active, generated);
    assert_eq!(x_active.shape, vec![active.len(), cfg.d_z], "active noisy shape");
    assert_eq!(cond.cols(), cfg.d_cond, "conditioning width");
    let p = |s: &str| store.tensor(store.index_of(&format!("{prefix}.{s}")));
    let cat = frame_in_rows(cfg, x_active, t, cond, active, generated, clean);
    let n = cat.rows();
    let mut h = vec![0.0f32; n * cfg.hidden];
    kernels::matmul(&mut h, &cat.data, &p("w1").data, n, cfg.in_dim(), cfg.hidden);
    let b1 = &p("b1").data;
    for r in 0..n {
        for j in 0..cfg.hidden {
            let cell = &mut h[r * cfg.hidden + j];
            *cell = kernels::gelu(*cell + b1[j]);
        }
    }
    let h_t = Tensor::new(&[n, cfg.hidden], h);
    let a = attention_plain(&h_t, &h_t, p("attn.wq"), p("attn.wk"), p("attn.wv"), p("attn.wo"));
    let mut h = h_t.data;
    for (x, y) in h.iter_mut().zip(&a.data) {
        *x += y;
    }
    let mut h2 = vec![0.0f32; n * cfg.hidden];
    kernels::matmul(&mut h2, &h, &p("w2").data, n, cfg.hidden, cfg.hidden);
    let b2 = &p("b2").data;
    for r in 0..n {
        for j in 0..cfg.hidden {
            let cell = &mut h2[r * cfg.hidden + j];
            *cell = kernels::gelu(*cell + b2[j]);
        }
    }
    let mut out = vec![0.0f32; n * cfg.d_z];
    kernels::matmul(&mut out, &h2, &p("w3").data, n, cfg.hidden, cfg.d_z);
    let b3 = &p("b3").data;
    for r in 0..n {
        for j in 0..cfg.d_z {
            out[r * cfg.d_z + j] += b3[j];
        }
    }
    let m = active.len();
    Tensor::new(&[m, cfg.d_z], out[(n - m) * cfg.d_z..].to_vec())
}

/// Deterministic chunk prediction from flattened conditioning, training
/// path. Output is NOT clamped here so squared-error gradients stay
/// alive outside [-1, 1]; the prediction op clamps.
pub fn regressor_graph(g: &mut Graph, cfg: &RegressorCfg, prefix: &str, cond: Var) -> Var {
    assert_eq!(g.value(cond).shape, vec![cfg.n_cond, cfg.d_cond], "conditioning shape");
    let cond_flat = g.reshape(cond, &[1, cfg.in_dim()]);
    let p = |g: &mut Graph, s: &str| g.param(&format!("{prefix}.{s}"));
    let (w1, b1, w2, b2) = (p(g, "w1"), p(g, "b1"), p(g, "w2"), p(g, "b2"));
    let h = g.matmul(cond_flat, w1);
    let h = g.add_row(h, b1);
    let h = g.gelu(h);
    let out = g.matmul(h, w2);
    let out = g.add_row(out, b2);
    g.reshape(out, &[cfg.l, cfg.d_a])
}

/// Deterministic point-estimate chunk, clamped to [-1, 1].
pub fn regressor_predict(
    store: &ParamStore,
    cfg: &RegressorCfg,
    prefix: &str,
    cond: &Tensor,
) -> Tensor {
    assert_eq!(cond.shape, vec![cfg.n_cond, cfg.d_cond], "conditioning shape");
    let p = |s: &str| store.tensor(store.index_of(&format!("{prefix}.{s}")));
    let mut h = vec![0.0f32; cfg.hidden];
    kernels::matmul(&mut h, &cond.data, &p("w1").data, 1, cfg.in_dim(), cfg.hidden);
    for (cell, b) in h.iter_mut().zip(&p("b1").data) {
        *cell = kernels::gelu(*cell + b);
    }
    let mut out = vec![0.0f32; cfg.chunk_dim()];
    kernels::matmul(&mut out, &h, &p("w2").data, 1, cfg.hidden, cfg.chunk_dim());
    for (cell, b) in out.iter_mut().zip(&p("b2").data) {
        *cell = (*cell + b).clamp(-1.0, 1.0);
    }
    Tensor::new(&[cfg.l, cfg.d_a], out)
}

fn randn_vec<R: rand::Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal)).collect()
}

/// Ancestral sampling of one action chunk, clamped to [-1, 1]. One
/// fresh noise vector is drawn per step regardless of sigma, so RNG
/// stream consumption is uniform.
pub fn sample_action_chunk<R: rand::Rng>(
    store: &ParamStore,
    cfg: &ActionDitCfg,
    prefix: &str,
    schedule: &Schedule,
    t_infer: usize,
    cond: &Tensor,
    rng: &mut R,
) -> Tensor {
    let n = cfg.chunk_dim();
    let mut x = Tensor::new(&[cfg.l, cfg.d_a], randn_vec(rng, n));
    for step in schedule.sampler_steps(t_infer) {
        let eps = action_denoise_plain(store, cfg, prefix, &x, step.t, cond);
        let noise = randn_vec(rng, n);
        step.apply(&mut x.data, &eps.data, &noise);
    }
    for v in x.data.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    x
}

/// Set-by-set generation of a frame's tokens: partition the indices,
/// then run a full reverse chain per set conditioned on every completed
/// set. Returns the tokens and, per set, a snapshot of that set's
/// content the moment it completed; completed content is never touched
/// again, which the snapshots let tests verify.
#[allow(clippy::too_many_arguments)]
pub fn sample_frame_traced<R: rand::Rng>(
    store: &ParamStore,
    cfg: &FrameHeadCfg,
    prefix: &str,
    schedule: &Schedule,
    t_infer: usize,
    k_sets: usize,
    cond: &Tensor,
    rng: &mut R,
) -> (Tensor, Vec<(Vec<usize>, Tensor)>) {
    let k_o = cond.rows();
    let sets = frame_set_partition(k_o, k_sets, rng);
    let mut tokens = Tensor::zeros(&[k_o, cfg.d_z]);
    let mut generated: Vec<usize> = Vec::with_capacity(k_o);
    let mut trace = Vec::with_capacity(k_sets);
    for set in &sets {
        let m = set.len();
        let mut x = Tensor::new(&[m, cfg.d_z], randn_vec(rng, m * cfg.d_z));
        for step in schedule.sampler_steps(t_infer) {
            let eps =
                frame_denoise_plain(store, cfg, prefix, &x, step.t, cond, set, &generated, &tokens);
            let noise = randn_vec(rng, m * cfg.d_z);
            step.apply(&mut x.data, &eps.data, &noise);
        }
        for (r, &tok) in set.iter().enumerate() {
            tokens.row_mut(tok).copy_from_slice(x.row(r));
        }
        generated.extend_from_slice(set);
        trace.push((set.clone(), x));
    }
    (tokens, trace)
}

/// `sample_frame_traced` without the per-set snapshots.
#[allow(clippy::too_many_arguments)]
pub fn sample_frame<R: rand::Rng>(
    store: &ParamStore,
    cfg: &FrameHeadCfg,
    prefix: &str,
    schedule: &Schedule,
    t_infer: usize,
    k_sets: usize,
    cond: &Tensor,
    rng: &mut R,
) -> Tensor {
    sample_frame_traced(store, cfg, prefix, schedule, t_infer, k_sets, cond, rng).0
}
