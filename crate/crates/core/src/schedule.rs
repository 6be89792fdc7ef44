//! Denoising-diffusion noise schedule and ancestral sampling steps.
//!
//! Timesteps are 1-indexed: `t` runs over `1..=t_max`, `alpha_bar(t)` is
//! the product of `1 - beta` up to and including `t`, and "t = 0" is the
//! clean signal. Sampling can run on a strided subset of the training
//! schedule; the per-step coefficients are derived from ratios of
//! `alpha_bar` so a full-length subset reproduces standard DDPM exactly.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaSchedule {
    /// Betas linearly spaced from 1e-4 to 2e-2 inclusive.
    Linear,
    /// Squared-cosine signal decay with offset 0.008, betas clipped at 0.999.
    Cosine,
}

pub struct Schedule {
    pub t_max: usize,
    betas: Vec<f32>,
    alpha_bars: Vec<f32>,
}

impl Schedule {
    pub fn new(kind: BetaSchedule, t_max: usize) -> Self {
        assert!(t_max >= 2, "schedule needs at least two steps, got {t_max}");
        let betas: Vec<f64> = match kind {
            BetaSchedule::Linear => {
                let (lo, hi) = (1e-4, 2e-2);
                (0..t_max).map(|i| lo + (hi - lo) * i as f64 / (t_max - 1) as f64).collect()
            }
            BetaSchedule::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    let arg = (t / t_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    arg.cos().powi(2)
                };
                let f0 = f(0.0);
                let mut prev = 1.0;
                (1..=t_max)
                    .map(|t| {
                        let ab = f(t as f64) / f0;
                        let beta = (1.0 - ab / prev).min(0.999);
                        prev *= 1.0 - beta;
                        beta
                    })
                    .collect()
            }
        };
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut prod = 1.0f64;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod as f32);
        }
        Schedule { t_max, betas: betas.iter().map(|&b| b as f32).collect(), alpha_bars }
    }

    pub fn beta(&self, t: usize) -> f32 {
        assert!((1..=self.t_max).contains(&t), "t {t} outside 1..={}", self.t_max);
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f32 {
        assert!((1..=self.t_max).contains(&t), "t {t} outside 1..={}", self.t_max);
        self.alpha_bars[t - 1]
    }

    /// Forward noising: `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
    pub fn q_sample(&self, x0: &[f32], eps: &[f32], t: usize) -> Vec<f32> {
        assert_eq!(x0.len(), eps.len(), "q_sample length mismatch");
        let ab = self.alpha_bar(t);
        let (cs, cn) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.iter().zip(eps).map(|(x, e)| cs * x + cn * e).collect()
    }

    /// `t_infer` timesteps spread evenly over `1..=t_max`, descending,
    /// always starting at `t_max`; the list ends at 1 whenever it has more
    /// than one entry.
    pub fn subsample_steps(t_max: usize, t_infer: usize) -> Vec<usize> {
        assert!(t_infer >= 1 && t_infer <= t_max, "t_infer {t_infer} outside 1..={t_max}");
        if t_infer == 1 {
            return vec![t_max];
        }
        (0..t_infer)
            .map(|i| {
                let frac = (t_infer - 1 - i) as f64 / (t_infer - 1) as f64;
                1 + ((t_max - 1) as f64 * frac).round() as usize
            })
            .collect()
    }

    /// Precomputed coefficients for one ancestral pass over the strided
    /// schedule. The last step's sigma is zero: it lands on the clean
    /// signal deterministically.
    pub fn sampler_steps(&self, t_infer: usize) -> Vec<SamplerStep> {
        let ts = Self::subsample_steps(self.t_max, t_infer);
        ts.iter()
            .enumerate()
            .map(|(i, &t)| {
                let ab_t = self.alpha_bar(t);
                let ab_next = if i + 1 < ts.len() { self.alpha_bar(ts[i + 1]) } else { 1.0 };
                let alpha_eff = ab_t / ab_next;
                let beta_eff = 1.0 - alpha_eff;
                SamplerStep {
                    t,
                    alpha_bar: ab_t,
                    inv_sqrt_alpha: 1.0 / alpha_eff.sqrt(),
                    eps_coef: beta_eff / (1.0 - ab_t).sqrt(),
                    sigma: if i + 1 < ts.len() { beta_eff.sqrt() } else { 0.0 },
                }
            })
            .collect()
    }
}

/// One ancestral update `x <- (x - eps_coef * eps_hat) / sqrt(alpha_eff)
/// + sigma * z`, with coefficients frozen at construction.
#[derive(Debug, Clone, Copy)]
pub struct SamplerStep {
    /// Original timestep index; conditions the denoiser.
    pub t: usize,
    pub alpha_bar: f32,
    inv_sqrt_alpha: f32,
    eps_coef: f32,
    pub sigma: f32,
}

impl SamplerStep {
    pub fn apply(&self, x: &mut [f32], eps_hat: &[f32], noise: &[f32]) {
        assert_eq!(x.len(), eps_hat.len(), "eps_hat length mismatch");
        assert_eq!(x.len(), noise.len(), "noise length mismatch");
        for i in 0..x.len() {
            x[i] = (x[i] - self.eps_coef * eps_hat[i]) * self.inv_sqrt_alpha
                + self.sigma * noise[i];
        }
    }
}

/// Sinusoidal embedding of a timestep, laid out as interleaved
/// (sin, cos) pairs over geometrically spaced frequencies.
pub fn timestep_embedding(t: usize, dim: usize, max_period: f32) -> Tensor {
    assert!(dim >= 2 && dim.is_multiple_of(2), "timestep embedding dim must be even, got {dim}");
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f32 / half as f32).exp();
        let arg = t as f32 * freq;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    Tensor::new(&[dim], out)
}
