//! Dense f32 tensors plus the raw compute kernels shared by the autodiff
//! graph and the no-grad inference path.
//!
//! Shapes are row-major. Most of the crate works with rank-2 tensors
//! (rows = sequence positions, cols = feature dims); rank-1 is used for
//! biases and single vectors. Shape misuse is a programming error and
//! panics; recoverable failures live at the crate's I/O boundaries.

/// Contiguous row-major f32 tensor. Gradients live with whoever owns the
/// backward pass (the graph tape, the parameter store), never here.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor shape {:?} wants {} elements, got {}",
            shape,
            n,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![1.0; n] }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Gaussian init, mean 0, the given standard deviation.
    pub fn randn<R: rand::Rng>(rng: &mut R, shape: &[usize], std: f32) -> Self {
        let n: usize = shape.iter().product();
        let data =
            (0..n).map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal) * std).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor; rank-1 counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    /// Columns of a rank-2 tensor; rank-1 is its own width.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Stack `other` below `self`; widths must match.
    pub fn append_rows(&mut self, other: &Tensor) {
        let c = self.cols();
        assert_eq!(c, other.cols(), "append_rows width mismatch");
        let r = self.rows() + other.rows();
        self.data.extend_from_slice(&other.data);
        self.shape = vec![r, c];
    }
}

// ── Raw kernels ──────────────────────────────────────────────────────────
//
// The graph ops and the cached inference path both call these, so a
// degenerate cache run reproduces a full forward bit for bit.

pub mod kernels {
    /// Sentinel threshold: an attention row whose maximum stays below this
    /// after masking had every key masked out.
    pub const MASKED_ROW_FLOOR: f32 = -1.0e8;

    /// out += a(m,k) * b(k,n). `out` must hold m*n elements.
    pub fn matmul(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
        assert_eq!(a.len(), m * k, "matmul lhs size");
        assert_eq!(b.len(), k * n, "matmul rhs size");
        assert_eq!(out.len(), m * n, "matmul out size");
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (l, &av) in arow.iter().enumerate() {
                let brow = &b[l * n..(l + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }

    /// out += a(m,k) * b(n,k)^T, i.e. dot products of rows.
    pub fn matmul_nt(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
        assert_eq!(a.len(), m * k, "matmul_nt lhs size");
        assert_eq!(b.len(), n * k, "matmul_nt rhs size");
        assert_eq!(out.len(), m * n, "matmul_nt out size");
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                let mut s = 0.0f32;
                for l in 0..k {
                    s += arow[l] * brow[l];
                }
                orow[j] += s;
            }
        }
    }

    /// out += a(m,k)^T * g(m,n), accumulating into a (k,n) buffer.
    pub fn matmul_tn(out: &mut [f32], a: &[f32], g: &[f32], m: usize, k: usize, n: usize) {
        assert_eq!(a.len(), m * k, "matmul_tn lhs size");
        assert_eq!(g.len(), m * n, "matmul_tn rhs size");
        assert_eq!(out.len(), k * n, "matmul_tn out size");
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for l in 0..k {
                let av = a[i * k + l];
                let orow = &mut out[l * n..(l + 1) * n];
                for j in 0..n {
                    orow[j] += av * grow[j];
                }
            }
        }
    }

    /// Numerically stable softmax over each row, in place. A row whose
    /// maximum sits below [`MASKED_ROW_FLOOR`] had every position masked;
    /// there is no distribution to take, so reject it loudly.
    pub fn softmax_rows(x: &mut [f32], rows: usize, cols: usize) {
        assert_eq!(x.len(), rows * cols, "softmax size");
        for r in 0..rows {
            let row = &mut x[r * cols..(r + 1) * cols];
            let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            assert!(
                mx > MASKED_ROW_FLOOR,
                "softmax row {r} is fully masked (max {mx})"
            );
            let mut sum = 0.0f32;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
    }

    pub const LN_EPS: f32 = 1e-5;

    /// Layer norm over the last dim with affine gain/bias. Writes the
    /// normalized-but-unscaled values into `xhat` (needed by backward)
    /// and 1/std per row into `inv_std`.
    #[allow(clippy::too_many_arguments)]
    pub fn layernorm_rows(
        out: &mut [f32],
        xhat: &mut [f32],
        inv_std: &mut [f32],
        x: &[f32],
        gain: &[f32],
        bias: &[f32],
        rows: usize,
        cols: usize,
    ) {
        assert_eq!(gain.len(), cols, "layernorm gain size");
        assert_eq!(bias.len(), cols, "layernorm bias size");
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let mut mean = 0.0f32;
            for &v in xr {
                mean += v;
            }
            mean /= cols as f32;
            let mut var = 0.0f32;
            for &v in xr {
                let d = v - mean;
                var += d * d;
            }
            var /= cols as f32;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            let xh = &mut xhat[r * cols..(r + 1) * cols];
            let o = &mut out[r * cols..(r + 1) * cols];
            for c in 0..cols {
                let h = (xr[c] - mean) * is;
                xh[c] = h;
                o[c] = h * gain[c] + bias[c];
            }
        }
    }

    const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

    /// Tanh-form GELU.
    pub fn gelu(x: f32) -> f32 {
        0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
    }

    /// d/dx of the tanh-form GELU.
    pub fn gelu_grad(x: f32) -> f32 {
        let u = GELU_C * (x + 0.044715 * x * x * x);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    }

    /// Rotary rotation applied independently inside each `head_dim` slice
    /// of every row: pair (2i, 2i+1) turns by `pos * base^(-2i/head_dim)`.
    /// `sign = -1.0` applies the inverse rotation (used by backward).
    pub fn rope_rows(
        x: &mut [f32],
        rows: usize,
        cols: usize,
        head_dim: usize,
        positions: &[f32],
        base: f32,
        sign: f32,
    ) {
        assert_eq!(positions.len(), rows, "rope positions per row");
        assert_eq!(cols % head_dim, 0, "rope head_dim must divide cols");
        assert_eq!(head_dim % 2, 0, "rope head_dim must be even");
        let half = head_dim / 2;
        for r in 0..rows {
            let pos = positions[r];
            let row = &mut x[r * cols..(r + 1) * cols];
            for h in (0..cols).step_by(head_dim) {
                for i in 0..half {
                    let freq = base.powf(-2.0 * i as f32 / head_dim as f32);
                    let ang = sign * pos * freq;
                    let (s, c) = ang.sin_cos();
                    let a = row[h + 2 * i];
                    let b = row[h + 2 * i + 1];
                    row[h + 2 * i] = a * c - b * s;
                    row[h + 2 * i + 1] = a * s + b * c;
                }
            }
        }
    }
}
