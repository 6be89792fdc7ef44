//! Pre-norm transformer over the interleaved physical sequence.
//!
//! Two forward paths share one set of weights and one set of kernels:
//! the graph path builds an autodiff tape for training, and the plain
//! path runs without a tape against a growable KV cache for closed-loop
//! inference. Both perform the same arithmetic in the same order, so for
//! identical inputs they agree bit for bit; tests assert exactly that.
//!
//! Rotary positions are scalar times from [`SeqLayout::rope_positions`].
//! Heads are split into two bands: the first half of the heads rotate
//! with a slow base (whole-step structure), the second half with a fast
//! base (sub-step offsets of action slots). Query/key pairs only ever
//! compare within one head, so mixed bases preserve the relative-
//! position property per head.

use crate::graph::{Graph, Var};
use crate::layout::SeqLayout;
use crate::optim::ParamStore;
use crate::tensor::{kernels, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub rope_base_coarse: f32,
    pub rope_base_fine: f32,
}

impl BackboneConfig {
    pub fn head_dim(&self) -> usize {
        assert_eq!(self.d % self.n_heads, 0, "heads must divide d");
        self.d / self.n_heads
    }

    /// First half of the heads (rounding up) uses the coarse band.
    pub fn head_base(&self, h: usize) -> f32 {
        assert!(h < self.n_heads);
        if h < self.n_heads.div_ceil(2) {
            self.rope_base_coarse
        } else {
            self.rope_base_fine
        }
    }
}

/// Register every transformer weight, drawing in a fixed name order so a
/// seeded RNG gives a reproducible init. Output projections are scaled
/// down by sqrt(2 * n_layers) to keep the residual stream near unit.
pub fn register_backbone_params<R: rand::Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    cfg: &BackboneConfig,
) {
    let d = cfg.d;
    let m = cfg.mlp_ratio * d;
    let base_std = 1.0 / (d as f32).sqrt();
    let proj_std = base_std / (2.0 * cfg.n_layers as f32).sqrt();
    let mlp_proj_std = 1.0 / (m as f32).sqrt() / (2.0 * cfg.n_layers as f32).sqrt();
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("bb.l{l}.{s}");
        store.insert(&p("ln1.g"), Tensor::ones(&[d]), true);
        store.insert(&p("ln1.b"), Tensor::zeros(&[d]), true);
        store.insert(&p("wq"), Tensor::randn(rng, &[d, d], base_std), true);
        store.insert(&p("wk"), Tensor::randn(rng, &[d, d], base_std), true);
        store.insert(&p("wv"), Tensor::randn(rng, &[d, d], base_std), true);
        store.insert(&p("wo"), Tensor::randn(rng, &[d, d], proj_std), true);
        store.insert(&p("ln2.g"), Tensor::ones(&[d]), true);
        store.insert(&p("ln2.b"), Tensor::zeros(&[d]), true);
        store.insert(&p("mlp.w1"), Tensor::randn(rng, &[d, m], base_std), true);
        store.insert(&p("mlp.b1"), Tensor::zeros(&[m]), true);
        store.insert(&p("mlp.w2"), Tensor::randn(rng, &[m, d], mlp_proj_std), true);
        store.insert(&p("mlp.b2"), Tensor::zeros(&[d]), true);
    }
    store.insert("bb.lnf.g", Tensor::ones(&[d]), true);
    store.insert("bb.lnf.b", Tensor::zeros(&[d]), true);
}

/// Trainable parameter count for this configuration, for sanity checks.
pub fn backbone_param_count(cfg: &BackboneConfig) -> usize {
    let d = cfg.d;
    let m = cfg.mlp_ratio * d;
    cfg.n_layers * (4 * d * d + 4 * d + d * m + m + m * d + d) + 2 * d
}

/// Training-path forward over a full sequence. `mask` must be the
/// layout's additive visibility mask for exactly these positions.
pub fn forward_graph(
    g: &mut Graph,
    cfg: &BackboneConfig,
    mut x: Var,
    positions: &[f32],
    mask: Var,
) -> Var {
    let s = g.value(x).rows();
    assert_eq!(g.value(x).cols(), cfg.d, "embedding width");
    assert_eq!(positions.len(), s, "one position per row");
    assert_eq!(g.value(mask).shape, vec![s, s], "mask shape");
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();
    for l in 0..cfg.n_layers {
        let p = |suffix: &str| format!("bb.l{l}.{suffix}");
        let ln1g = g.param(&p("ln1.g"));
        let ln1b = g.param(&p("ln1.b"));
        let h = g.layernorm(x, ln1g, ln1b);
        let wq = g.param(&p("wq"));
        let wk = g.param(&p("wk"));
        let wv = g.param(&p("wv"));
        let q = g.matmul(h, wq);
        let k = g.matmul(h, wk);
        let v = g.matmul(h, wv);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hh in 0..cfg.n_heads {
            let base = cfg.head_base(hh);
            let qh = g.slice_cols(q, hh * hd, (hh + 1) * hd);
            let kh = g.slice_cols(k, hh * hd, (hh + 1) * hd);
            let vh = g.slice_cols(v, hh * hd, (hh + 1) * hd);
            let qh = g.rope(qh, positions, base, hd);
            let kh = g.rope(kh, positions, base, hd);
            let kt = g.transpose(kh);
            let sc = g.matmul(qh, kt);
            let sc = g.scale(sc, scale);
            let sc = g.add(sc, mask);
            let pr = g.softmax_rows(sc);
            heads.push(g.matmul(pr, vh));
        }
        let cat = g.concat_cols(&heads);
        let wo = g.param(&p("wo"));
        let proj = g.matmul(cat, wo);
        x = g.add(x, proj);

        let ln2g = g.param(&p("ln2.g"));
        let ln2b = g.param(&p("ln2.b"));
        let h2 = g.layernorm(x, ln2g, ln2b);
        let w1 = g.param(&p("mlp.w1"));
        let b1 = g.param(&p("mlp.b1"));
        let w2 = g.param(&p("mlp.w2"));
        let b2 = g.param(&p("mlp.b2"));
        let mid = g.matmul(h2, w1);
        let mid = g.add_row(mid, b1);
        let mid = g.gelu(mid);
        let out = g.matmul(mid, w2);
        let out = g.add_row(out, b2);
        x = g.add(x, out);
    }
    let lnfg = g.param("bb.lnf.g");
    let lnfb = g.param("bb.lnf.b");
    g.layernorm(x, lnfg, lnfb)
}

/// Per-layer, per-head key/value rows. Keys are stored after rotation so
/// cached entries never need re-rotating.
pub struct KvCache {
    n_heads: usize,
    head_dim: usize,
    len: usize,
    layers: Vec<LayerKv>,
}

struct LayerKv {
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl KvCache {
    pub fn new(cfg: &BackboneConfig) -> Self {
        let layers = (0..cfg.n_layers)
            .map(|_| LayerKv {
                k: vec![Vec::new(); cfg.n_heads],
                v: vec![Vec::new(); cfg.n_heads],
            })
            .collect();
        KvCache { n_heads: cfg.n_heads, head_dim: cfg.head_dim(), len: 0, layers }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drop every cached row at or beyond `new_len`. The caller is
    /// responsible for truncating only at cache boundaries of its layout.
    pub fn truncate(&mut self, new_len: usize) {
        assert!(new_len <= self.len, "cannot truncate {} up to {new_len}", self.len);
        for layer in &mut self.layers {
            for h in 0..self.n_heads {
                layer.k[h].truncate(new_len * self.head_dim);
                layer.v[h].truncate(new_len * self.head_dim);
            }
        }
        self.len = new_len;
    }
}

/// Inference-path forward: append `x_new` (the embeddings of rows
/// `cache.len()..cache.len() + m`) and return the final-norm outputs for
/// those rows. Both ends of the appended span must be cache boundaries;
/// anything else would let a cached token depend on rows that are not in
/// the cache yet.
pub fn forward_append(
    store: &ParamStore,
    cfg: &BackboneConfig,
    layout: &SeqLayout,
    cache: &mut KvCache,
    x_new: &Tensor,
) -> Tensor {
    let start = cache.len();
    let m = x_new.rows();
    let end = start + m;
    assert!(m > 0, "appending nothing");
    assert_eq!(x_new.cols(), cfg.d, "embedding width");
    assert!(end <= layout.total(), "append past end of layout");
    assert!(layout.is_cache_boundary(start), "append start {start} is not a cache boundary");
    assert!(layout.is_cache_boundary(end), "append end {end} is not a cache boundary");
    assert_eq!(cache.layers.len(), cfg.n_layers, "cache built for a different config");

    let d = cfg.d;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f32).sqrt();
    let positions = layout.rope_positions();
    let new_pos = &positions[start..end];

    let t = |name: &str| store.tensor(store.index_of(name));
    let mut x = x_new.data.clone();
    let mut xhat = vec![0.0f32; m * d.max(cfg.mlp_ratio * d)];
    let mut inv_std = vec![0.0f32; m];

    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("bb.l{l}.{s}");
        let mut h = vec![0.0f32; m * d];
        kernels::layernorm_rows(
            &mut h,
            &mut xhat[..m * d],
            &mut inv_std,
            &x,
            &t(&p("ln1.g")).data,
            &t(&p("ln1.b")).data,
            m,
            d,
        );
        let mut q = vec![0.0f32; m * d];
        let mut k = vec![0.0f32; m * d];
        let mut v = vec![0.0f32; m * d];
        kernels::matmul(&mut q, &h, &t(&p("wq")).data, m, d, d);
        kernels::matmul(&mut k, &h, &t(&p("wk")).data, m, d, d);
        kernels::matmul(&mut v, &h, &t(&p("wv")).data, m, d, d);

        let mut cat = vec![0.0f32; m * d];
        for hh in 0..cfg.n_heads {
            let base = cfg.head_base(hh);
            let slice = |src: &[f32]| -> Vec<f32> {
                let mut out = vec![0.0f32; m * hd];
                for i in 0..m {
                    out[i * hd..(i + 1) * hd]
                        .copy_from_slice(&src[i * d + hh * hd..i * d + (hh + 1) * hd]);
                }
                out
            };
            let mut qh = slice(&q);
            let mut kh = slice(&k);
            let vh = slice(&v);
            kernels::rope_rows(&mut qh, m, hd, hd, new_pos, base, 1.0);
            kernels::rope_rows(&mut kh, m, hd, hd, new_pos, base, 1.0);
            let layer = &mut cache.layers[l];
            layer.k[hh].extend_from_slice(&kh);
            layer.v[hh].extend_from_slice(&vh);

            let mut sc = vec![0.0f32; m * end];
            kernels::matmul_nt(&mut sc, &qh, &layer.k[hh], m, hd, end);
            for i in 0..m {
                let qa = start + i;
                for ka in 0..end {
                    let cell = &mut sc[i * end + ka];
                    *cell = *cell * scale
                        + if layout.allowed(qa, ka) { 0.0 } else { kernels::MASKED_ROW_FLOOR };
                }
            }
            kernels::softmax_rows(&mut sc, m, end);
            let mut oh = vec![0.0f32; m * hd];
            kernels::matmul(&mut oh, &sc, &layer.v[hh], m, end, hd);
            for i in 0..m {
                cat[i * d + hh * hd..i * d + (hh + 1) * hd]
                    .copy_from_slice(&oh[i * hd..(i + 1) * hd]);
            }
        }
        let mut proj = vec![0.0f32; m * d];
        kernels::matmul(&mut proj, &cat, &t(&p("wo")).data, m, d, d);
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += pv;
        }

        let mid_w = cfg.mlp_ratio * d;
        let mut h2 = vec![0.0f32; m * d];
        kernels::layernorm_rows(
            &mut h2,
            &mut xhat[..m * d],
            &mut inv_std,
            &x,
            &t(&p("ln2.g")).data,
            &t(&p("ln2.b")).data,
            m,
            d,
        );
        let mut mid = vec![0.0f32; m * mid_w];
        kernels::matmul(&mut mid, &h2, &t(&p("mlp.w1")).data, m, d, mid_w);
        let b1 = &t(&p("mlp.b1")).data;
        for i in 0..m {
            for j in 0..mid_w {
                let cell = &mut mid[i * mid_w + j];
                *cell = kernels::gelu(*cell + b1[j]);
            }
        }
        let mut out = vec![0.0f32; m * d];
        kernels::matmul(&mut out, &mid, &t(&p("mlp.w2")).data, m, mid_w, d);
        let b2 = &t(&p("mlp.b2")).data;
        for i in 0..m {
            for j in 0..d {
                x[i * d + j] += out[i * d + j] + b2[j];
            }
        }
    }
    cache.len = end;

    let mut final_out = vec![0.0f32; m * d];
    kernels::layernorm_rows(
        &mut final_out,
        &mut xhat[..m * d],
        &mut inv_std,
        &x,
        &t("bb.lnf.g").data,
        &t("bb.lnf.b").data,
        m,
        d,
    );
    Tensor::new(&[m, d], final_out)
}

/// Whole sequence through a throwaway cache; the reference inference path.
pub fn forward_full_plain(
    store: &ParamStore,
    cfg: &BackboneConfig,
    layout: &SeqLayout,
    x: &Tensor,
) -> Tensor {
    let mut cache = KvCache::new(cfg);
    forward_append(store, cfg, layout, &mut cache, x)
}
