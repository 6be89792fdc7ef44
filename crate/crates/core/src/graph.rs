//! Reverse-mode autodiff over a flat tape of eagerly-evaluated ops.
//!
//! A [`Graph`] is built per forward pass: ops execute immediately and
//! record what they need for the backward sweep. Parameters come from a
//! shared [`ParamStore`](crate::optim::ParamStore); a graph never mutates
//! the store, it only reports per-parameter gradients, so independent
//! graphs can run on separate threads against the same store and the
//! caller controls reduction order.

use crate::optim::ParamStore;
use crate::tensor::{kernels, Tensor};
use std::collections::HashMap;

/// Handle to a node in one specific graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    SoftmaxRows(Var),
    Layernorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    Rope { x: Var, head_dim: usize, positions: Vec<f32>, base: f32 },
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    MeanAll(Var),
    AddN(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    param_vars: HashMap<usize, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph { store, nodes: Vec::new(), grads: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; gradients are not tracked through it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input leaf with gradient tracking: backward accumulates into it
    /// and `grad` reads it out. For probing d loss / d input where the
    /// input is data rather than a parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Named parameter leaf. Repeated requests return the same node so
    /// gradient contributions accumulate in one place.
    pub fn param(&mut self, name: &str) -> Var {
        let idx = self.store.index_of(name);
        if let Some(&v) = self.param_vars.get(&idx) {
            return v;
        }
        let tensor = self.store.tensor(idx).clone();
        let trainable = self.store.is_trainable(idx);
        let v = self.push(tensor, Op::Param(idx), trainable);
        self.param_vars.insert(idx, v);
        v
    }

    // ── Ops ──────────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = (self.value(a).rows(), self.value(a).cols());
        let (k2, n) = (self.value(b).rows(), self.value(b).cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        kernels::matmul(&mut out, &self.value(a).data, &self.value(b).data, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&[m, n], out), Op::Matmul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        let x = &self.value(a).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let ng = self.needs(a);
        self.push(Tensor::new(&[c, r], out), Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "add shape mismatch");
        let out: Vec<f32> =
            self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&shape, out), Op::Add(a, b), ng)
    }

    /// Broadcast-add a length-c vector to every row of an (r, c) tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        assert_eq!(self.value(row).len(), c, "add_row width mismatch");
        let rv = self.value(row).data.clone();
        let mut out = self.value(a).data.clone();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += rv[j];
            }
        }
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a) || self.needs(row);
        self.push(Tensor::new(&shape, out), Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "sub shape mismatch");
        let out: Vec<f32> =
            self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x - y).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&shape, out), Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "mul shape mismatch");
        let out: Vec<f32> =
            self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&shape, out), Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out: Vec<f32> = self.value(a).data.iter().map(|x| x * c).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a);
        self.push(Tensor::new(&shape, out), Op::Scale(a, c), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f32> = self.value(a).data.iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a);
        self.push(Tensor::new(&shape, out), Op::Gelu(a), ng)
    }

    /// Softmax over the last dim. Fully-masked rows (everything at or
    /// below the mask floor) are rejected by the kernel.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        let mut out = self.value(a).data.clone();
        kernels::softmax_rows(&mut out, r, c);
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a);
        self.push(Tensor::new(&shape, out), Op::SoftmaxRows(a), ng)
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        kernels::layernorm_rows(
            &mut out,
            &mut xhat,
            &mut inv_std,
            &self.value(x).data,
            &self.value(gain).data,
            &self.value(bias).data,
            r,
            c,
        );
        let shape = self.value(x).shape.clone();
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(Tensor::new(&shape, out), Op::Layernorm { x, gain, bias, xhat, inv_std }, ng)
    }

    /// Rotary position application; one position per row, rotating inside
    /// each `head_dim` slice.
    pub fn rope(&mut self, x: Var, positions: &[f32], base: f32, head_dim: usize) -> Var {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        let mut out = self.value(x).data.clone();
        kernels::rope_rows(&mut out, r, c, head_dim, positions, base, 1.0);
        let shape = self.value(x).shape.clone();
        let ng = self.needs(x);
        self.push(
            Tensor::new(&shape, out),
            Op::Rope { x, head_dim, positions: positions.to_vec(), base },
            ng,
        )
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        assert!(r0 < r1 && r1 <= r, "slice_rows {r0}..{r1} of {r}");
        let out = self.value(a).data[r0 * c..r1 * c].to_vec();
        let ng = self.needs(a);
        self.push(Tensor::new(&[r1 - r0, c], out), Op::SliceRows(a, r0), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        let mut ng = false;
        for &p in parts {
            assert_eq!(self.value(p).cols(), c, "concat_rows width mismatch");
            rows += self.value(p).rows();
            out.extend_from_slice(&self.value(p).data);
            ng |= self.needs(p);
        }
        self.push(Tensor::new(&[rows, c], out), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        assert!(c0 < c1 && c1 <= c, "slice_cols {c0}..{c1} of {c}");
        let w = c1 - c0;
        let mut out = vec![0.0; r * w];
        for i in 0..r {
            out[i * w..(i + 1) * w].copy_from_slice(&self.value(a).data[i * c + c0..i * c + c1]);
        }
        let ng = self.needs(a);
        self.push(Tensor::new(&[r, w], out), Op::SliceCols(a, c0, c1), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        let mut ng = false;
        for &p in parts {
            assert_eq!(self.value(p).rows(), r, "concat_cols height mismatch");
            let w = self.value(p).cols();
            for i in 0..r {
                out[i * total + off..i * total + off + w]
                    .copy_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
            off += w;
            ng |= self.needs(p);
        }
        self.push(Tensor::new(&[r, total], out), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Pick rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        let mut out = vec![0.0; idx.len() * c];
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < r, "gather_rows index {j} out of {r}");
            out[i * c..(i + 1) * c].copy_from_slice(&self.value(a).data[j * c..(j + 1) * c]);
        }
        let ng = self.needs(a);
        self.push(Tensor::new(&[idx.len(), c], out), Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(self.value(a).len(), n, "reshape {:?} to {shape:?}", self.value(a).shape);
        let data = self.value(a).data.clone();
        let ng = self.needs(a);
        self.push(Tensor::new(shape, data), Op::Reshape(a), ng)
    }

    /// Mean over every element, producing a scalar node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        assert!(n > 0, "mean_all of empty tensor");
        let s: f32 = self.value(a).data.iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s / n as f32), Op::MeanAll(a), ng)
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "add_n of nothing");
        let shape = self.value(parts[0]).shape.clone();
        let mut out = vec![0.0; self.value(parts[0]).len()];
        let mut ng = false;
        for &p in parts {
            assert_eq!(self.value(p).shape, shape, "add_n shape mismatch");
            for (o, v) in out.iter_mut().zip(&self.value(p).data) {
                *o += v;
            }
            ng |= self.needs(p);
        }
        self.push(Tensor::new(&shape, out), Op::AddN(parts.to_vec()), ng)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate on every
    /// node that (transitively) touches a trainable parameter.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        ensure_grad(&self.nodes, &mut self.grads, loss)[0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            backprop_node(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
    }

    /// Per-parameter gradients gathered from this graph's leaves, keyed by
    /// store index and sorted so reductions are order-stable.
    pub fn param_grads(&self) -> Vec<(usize, &[f32])> {
        let mut out: Vec<(usize, &[f32])> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Param(idx) => self.grads[i].as_deref().map(|g| (idx, g)),
                _ => None,
            })
            .collect();
        out.sort_by_key(|(idx, _)| *idx);
        out
    }

    /// Consume the graph, keeping only its parameter gradients. This ends
    /// the graph's borrow of the store, so the caller can then mutate the
    /// store (one `accumulate_grad` per entry, in the returned order).
    pub fn into_param_grads(self) -> Vec<(usize, Vec<f32>)> {
        let mut out: Vec<(usize, Vec<f32>)> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match node.op {
                Op::Param(idx) => self.grads[i].clone().map(|g| (idx, g)),
                _ => None,
            })
            .collect();
        out.sort_by_key(|(idx, _)| *idx);
        out
    }
}

fn ensure_grad<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f32>>], v: Var) -> &'g mut Vec<f32> {
    if grads[v.0].is_none() {
        grads[v.0] = Some(vec![0.0; nodes[v.0].value.len()]);
    }
    grads[v.0].as_mut().unwrap()
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f32>>], i: usize, g: &[f32]) {
    let needs = |v: Var| nodes[v.0].needs_grad;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Input | Op::Param(_) => {}
        Op::Matmul(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).cols();
            if needs(*a) {
                kernels::matmul_nt(ensure_grad(nodes, grads, *a), g, &val(*b).data, m, n, k);
            }
            if needs(*b) {
                kernels::matmul_tn(ensure_grad(nodes, grads, *b), &val(*a).data, g, m, k, n);
            }
        }
        Op::Transpose(a) => {
            if needs(*a) {
                let (r, c) = (val(*a).rows(), val(*a).cols());
                let ga = ensure_grad(nodes, grads, *a);
                for x in 0..r {
                    for y in 0..c {
                        ga[x * c + y] += g[y * r + x];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if needs(v) {
                    for (d, s) in ensure_grad(nodes, grads, v).iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
        }
        Op::AddRow(a, row) => {
            let c = val(*a).cols();
            if needs(*a) {
                for (d, s) in ensure_grad(nodes, grads, *a).iter_mut().zip(g) {
                    *d += s;
                }
            }
            if needs(*row) {
                let gr = ensure_grad(nodes, grads, *row);
                for (j, s) in g.iter().enumerate() {
                    gr[j % c] += s;
                }
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                for (d, s) in ensure_grad(nodes, grads, *a).iter_mut().zip(g) {
                    *d += s;
                }
            }
            if needs(*b) {
                for (d, s) in ensure_grad(nodes, grads, *b).iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                for ((d, s), x) in
                    ensure_grad(nodes, grads, *a).iter_mut().zip(g).zip(&val(*b).data)
                {
                    *d += s * x;
                }
            }
            if needs(*b) {
                for ((d, s), x) in
                    ensure_grad(nodes, grads, *b).iter_mut().zip(g).zip(&val(*a).data)
                {
                    *d += s * x;
                }
            }
        }
        Op::Scale(a, c) => {
            if needs(*a) {
                for (d, s) in ensure_grad(nodes, grads, *a).iter_mut().zip(g) {
                    *d += s * c;
                }
            }
        }
        Op::Gelu(a) => {
            if needs(*a) {
                for ((d, s), x) in
                    ensure_grad(nodes, grads, *a).iter_mut().zip(g).zip(&val(*a).data)
                {
                    *d += s * kernels::gelu_grad(*x);
                }
            }
        }
        Op::SoftmaxRows(a) => {
            if needs(*a) {
                let p = &nodes[i].value;
                let (r, c) = (p.rows(), p.cols());
                let ga = ensure_grad(nodes, grads, *a);
                for row in 0..r {
                    let pr = &p.data[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let dot: f32 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    let out = &mut ga[row * c..(row + 1) * c];
                    for j in 0..c {
                        out[j] += pr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::Layernorm { x, gain, bias, xhat, inv_std } => {
            let (r, c) = (val(*x).rows(), val(*x).cols());
            if needs(*gain) {
                let gg = ensure_grad(nodes, grads, *gain);
                for row in 0..r {
                    for j in 0..c {
                        gg[j] += g[row * c + j] * xhat[row * c + j];
                    }
                }
            }
            if needs(*bias) {
                let gb = ensure_grad(nodes, grads, *bias);
                for row in 0..r {
                    for j in 0..c {
                        gb[j] += g[row * c + j];
                    }
                }
            }
            if needs(*x) {
                let gv = &val(*gain).data;
                let nf = c as f32;
                let gx = ensure_grad(nodes, grads, *x);
                for row in 0..r {
                    let mut sum_dh = 0.0f32;
                    let mut sum_dh_xh = 0.0f32;
                    for j in 0..c {
                        let dh = g[row * c + j] * gv[j];
                        sum_dh += dh;
                        sum_dh_xh += dh * xhat[row * c + j];
                    }
                    let is = inv_std[row];
                    for j in 0..c {
                        let dh = g[row * c + j] * gv[j];
                        gx[row * c + j] +=
                            is / nf * (nf * dh - sum_dh - xhat[row * c + j] * sum_dh_xh);
                    }
                }
            }
        }
        Op::Rope { x, head_dim, positions, base } => {
            if needs(*x) {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                let mut gr = g.to_vec();
                kernels::rope_rows(&mut gr, r, c, *head_dim, positions, *base, -1.0);
                for (d, s) in ensure_grad(nodes, grads, *x).iter_mut().zip(&gr) {
                    *d += s;
                }
            }
        }
        Op::SliceRows(a, r0) => {
            if needs(*a) {
                let c = val(*a).cols();
                let ga = ensure_grad(nodes, grads, *a);
                for (j, s) in g.iter().enumerate() {
                    ga[r0 * c + j] += s;
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).len();
                if needs(p) {
                    for (d, s) in ensure_grad(nodes, grads, p).iter_mut().zip(&g[off..off + n]) {
                        *d += s;
                    }
                }
                off += n;
            }
        }
        Op::SliceCols(a, c0, c1) => {
            if needs(*a) {
                let (r, c) = (val(*a).rows(), val(*a).cols());
                let w = c1 - c0;
                let ga = ensure_grad(nodes, grads, *a);
                for row in 0..r {
                    for j in 0..w {
                        ga[row * c + c0 + j] += g[row * w + j];
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let r = val(parts[0]).rows();
            let total: usize = parts.iter().map(|&p| val(p).cols()).sum();
            let mut off = 0;
            for &p in parts {
                let w = val(p).cols();
                if needs(p) {
                    let gp = ensure_grad(nodes, grads, p);
                    for row in 0..r {
                        for j in 0..w {
                            gp[row * w + j] += g[row * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }
        Op::GatherRows(a, idx) => {
            if needs(*a) {
                let c = val(*a).cols();
                let ga = ensure_grad(nodes, grads, *a);
                for (i2, &j) in idx.iter().enumerate() {
                    for k2 in 0..c {
                        ga[j * c + k2] += g[i2 * c + k2];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if needs(*a) {
                for (d, s) in ensure_grad(nodes, grads, *a).iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Op::MeanAll(a) => {
            if needs(*a) {
                let n = val(*a).len() as f32;
                let s = g[0] / n;
                for d in ensure_grad(nodes, grads, *a).iter_mut() {
                    *d += s;
                }
            }
        }
        Op::AddN(parts) => {
            for &p in parts {
                if needs(p) {
                    for (d, s) in ensure_grad(nodes, grads, p).iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::{assert_grad_close, oracle_gradient};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal) * scale).collect()
    }

    /// Check analytic vs central-difference gradients for one parameter of
    /// a forward closure. Tolerances account for f32 forward noise.
    fn gradcheck(store: &mut ParamStore, name: &str, f: impl Fn(&mut Graph) -> Var) {
        let analytic = {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            g.backward(loss);
            let v = g.param(name);
            g.grad(v).expect("no analytic gradient").to_vec()
        };
        let numeric = oracle_gradient(store, name, 1e-2, |s| {
            let mut g = Graph::new(s);
            let loss = f(&mut g);
            g.value(loss).data[0]
        });
        assert_grad_close(&analytic, &numeric, 2e-3, 2e-2, name);
    }

    #[test]
    fn mlp_block_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.insert("w1", Tensor::new(&[4, 5], randn(&mut rng, 20, 0.5)), true);
        store.insert("b1", Tensor::new(&[5], randn(&mut rng, 5, 0.5)), true);
        store.insert("w2", Tensor::new(&[5, 3], randn(&mut rng, 15, 0.5)), true);
        let x = Tensor::new(&[2, 4], randn(&mut rng, 8, 1.0));
        let weights = Tensor::new(&[2, 3], randn(&mut rng, 6, 1.0));
        let f = move |g: &mut Graph| {
            let x = g.input(x.clone());
            let w = g.input(weights.clone());
            let w1 = g.param("w1");
            let b1 = g.param("b1");
            let w2 = g.param("w2");
            let h = g.matmul(x, w1);
            let h = g.add_row(h, b1);
            let h = g.gelu(h);
            let y = g.matmul(h, w2);
            let y = g.mul(y, w);
            g.mean_all(y)
        };
        for name in ["w1", "b1", "w2"] {
            gradcheck(&mut store, name, &f);
        }
    }

    #[test]
    fn masked_attention_gradients_match_finite_differences() {
        // One self-attention head with rotary positions and a causal mask,
        // which is the exact op composition the backbone uses.
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let (t, d) = (4, 6);
        let mut store = ParamStore::new();
        for name in ["wq", "wk", "wv"] {
            store.insert(name, Tensor::new(&[d, d], randn(&mut rng, d * d, 0.4)), true);
        }
        let x = Tensor::new(&[t, d], randn(&mut rng, t * d, 1.0));
        let weights = Tensor::new(&[t, d], randn(&mut rng, t * d, 1.0));
        let mut mask = vec![0.0f32; t * t];
        for i in 0..t {
            for j in (i + 1)..t {
                mask[i * t + j] = kernels::MASKED_ROW_FLOOR;
            }
        }
        let mask = Tensor::new(&[t, t], mask);
        let positions: Vec<f32> = (0..t).map(|i| i as f32).collect();
        let f = move |g: &mut Graph| {
            let x = g.input(x.clone());
            let w = g.input(weights.clone());
            let m = g.input(mask.clone());
            let wq = g.param("wq");
            let wk = g.param("wk");
            let wv = g.param("wv");
            let q = g.matmul(x, wq);
            let k = g.matmul(x, wk);
            let v = g.matmul(x, wv);
            let q = g.rope(q, &positions, 100.0, d);
            let k = g.rope(k, &positions, 100.0, d);
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scores = g.scale(scores, 1.0 / (d as f32).sqrt());
            let scores = g.add(scores, m);
            let p = g.softmax_rows(scores);
            let o = g.matmul(p, v);
            let o = g.mul(o, w);
            g.mean_all(o)
        };
        for name in ["wq", "wk", "wv"] {
            gradcheck(&mut store, name, &f);
        }
    }

    #[test]
    fn layernorm_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let (r, c) = (3, 5);
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[c, c], randn(&mut rng, c * c, 0.6)), true);
        store.insert("gain", Tensor::new(&[c], randn(&mut rng, c, 0.3)), true);
        store.insert("bias", Tensor::new(&[c], randn(&mut rng, c, 0.3)), true);
        let x = Tensor::new(&[r, c], randn(&mut rng, r * c, 1.0));
        let weights = Tensor::new(&[r, c], randn(&mut rng, r * c, 1.0));
        let f = move |g: &mut Graph| {
            let x = g.input(x.clone());
            let wts = g.input(weights.clone());
            let w = g.param("w");
            let gain = g.param("gain");
            let bias = g.param("bias");
            let h = g.matmul(x, w);
            let h = g.layernorm(h, gain, bias);
            let h = g.mul(h, wts);
            g.mean_all(h)
        };
        for name in ["w", "gain", "bias"] {
            gradcheck(&mut store, name, &f);
        }
    }

    #[test]
    fn slice_concat_gather_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let mut store = ParamStore::new();
        store.insert("p", Tensor::new(&[6, 4], randn(&mut rng, 24, 0.8)), true);
        let w_top = Tensor::new(&[6, 4], randn(&mut rng, 24, 1.0));
        let f = move |g: &mut Graph| {
            let p = g.param("p");
            let w = g.input(w_top.clone());
            let a = g.slice_rows(p, 0, 2);
            let b = g.gather_rows(p, &[5, 0, 0, 3]);
            let stacked = g.concat_rows(&[a, b]);
            let left = g.slice_cols(stacked, 0, 2);
            let right = g.slice_cols(stacked, 2, 4);
            let swapped = g.concat_cols(&[right, left]);
            let diff = g.sub(swapped, stacked);
            let scaled = g.scale(stacked, 0.5);
            let total = g.add_n(&[diff, scaled, swapped]);
            let flat = g.reshape(total, &[2, 12]);
            let total = g.reshape(flat, &[6, 4]);
            let total = g.mul(total, w);
            g.mean_all(total)
        };
        gradcheck(&mut store, "p", &f);
    }

    #[test]
    fn repeated_param_requests_share_one_leaf() {
        // Two branches read the same parameter; its gradient must be the
        // sum over both paths, and the tape must hold a single leaf.
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[3, 3], randn(&mut rng, 9, 0.5)), true);
        let x = Tensor::new(&[2, 3], randn(&mut rng, 6, 1.0));
        let f = move |g: &mut Graph| {
            let x = g.input(x.clone());
            let w1 = g.param("w");
            let w2 = g.param("w");
            assert_eq!(w1, w2);
            let a = g.matmul(x, w1);
            let b = g.gelu(a);
            let c = g.matmul(b, w2);
            g.mean_all(c)
        };
        gradcheck(&mut store, "w", &f);
    }

    #[test]
    fn inputs_and_frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]), true);
        store.insert("frozen", Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]), false);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(&[2, 2], vec![1.0, -1.0, 2.0, 0.5]));
        let w = g.param("w");
        let fz = g.param("frozen");
        let h = g.matmul(x, w);
        let h = g.matmul(h, fz);
        let loss = g.mean_all(h);
        g.backward(loss);
        assert!(g.grad(w).is_some());
        assert!(g.grad(fz).is_none());
        assert!(g.grad(x).is_none());
        let pg = g.param_grads();
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].0, store.index_of("w"));
    }

    #[test]
    fn accumulate_param_grads_sums_across_graphs() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2], vec![1.0, 2.0]), true);
        let ones = Tensor::new(&[2], vec![1.0, 1.0]);
        for _ in 0..2 {
            let grads = {
                let mut g = Graph::new(&store);
                let w = g.param("w");
                let x = g.input(ones.clone());
                let y = g.mul(w, x);
                let loss = g.mean_all(y);
                g.backward(loss);
                g.into_param_grads()
            };
            for (idx, g) in &grads {
                store.accumulate_grad(*idx, g);
            }
        }
        // d(mean(w * 1))/dw = 0.5 per element, accumulated twice.
        assert_eq!(store.grad(0).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2], vec![1.0, 2.0]), true);
        let mut g = Graph::new(&store);
        let w = g.param("w");
        g.backward(w);
    }
}
