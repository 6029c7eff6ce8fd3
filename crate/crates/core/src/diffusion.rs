//! ε-prediction diffusion over state trajectories: cosine schedule, a fully
//! convolutional temporal denoiser, variable-length training crops and
//! endpoint-conditioned sampling.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{NormalizedDataset, StateRow};
use crate::error::{Error, Result};
use crate::maze::STATE_DIM;
use crate::nn::layers::{
    crop, crop_backward, reflect_pad, reflect_pad_backward, silu, silu_backward, sinusoidal,
    Conv1d, GroupNorm, Linear, NormCache,
};
use crate::nn::{
    adam_step, finite, value_and_grad, AdamCfg, Checkpoint, EmaStore, Objective, OptimState,
    ParamStore, Real,
};
use crate::rng;

/// Variance schedule; index `t` runs over `1..=t_diff`, with `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub t_diff: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Posterior variance `β̃_t`; zero at `t = 1`.
    pub sigma2: Vec<f64>,
}

const COSINE_OFFSET: f64 = 0.008;
const BETA_CLIP: f64 = 0.999;

/// Cosine schedule: `ᾱ_t = f(t)/f(0)` with `f(t) = cos²(((t/T)+s)/(1+s)·π/2)`,
/// betas clipped at 0.999 and `ᾱ` recomputed as the product of `1 − β`.
pub fn cosine_schedule(t_diff: usize) -> Result<NoiseSchedule> {
    if t_diff == 0 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    let f = |t: f64| {
        let x = ((t / t_diff as f64) + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0.0);
    let raw: Vec<f64> = (0..=t_diff).map(|t| f(t as f64) / f0).collect();
    let mut beta = vec![0.0; t_diff + 1];
    let mut alpha = vec![1.0; t_diff + 1];
    let mut alpha_bar = vec![1.0; t_diff + 1];
    let mut sigma2 = vec![0.0; t_diff + 1];
    for t in 1..=t_diff {
        beta[t] = (1.0 - raw[t] / raw[t - 1]).clamp(1e-12, BETA_CLIP);
        alpha[t] = 1.0 - beta[t];
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
        sigma2[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
    }
    Ok(NoiseSchedule {
        t_diff,
        beta,
        alpha,
        alpha_bar,
        sigma2,
    })
}

/// `τᵗ = √ᾱ_t·τ⁰ + √(1−ᾱ_t)·ε`.
pub fn q_sample(tau0: &[f32], t: usize, eps: &[f32], sched: &NoiseSchedule) -> Result<Vec<f32>> {
    if tau0.len() != eps.len() {
        return Err(Error::Shape(format!("τ⁰ has {} values, ε has {}", tau0.len(), eps.len())));
    }
    check_t(t, sched)?;
    let a = sched.alpha_bar[t].sqrt();
    let b = (1.0 - sched.alpha_bar[t]).sqrt();
    Ok(tau0
        .iter()
        .zip(eps)
        .map(|(x, e)| (a * *x as f64 + b * *e as f64) as f32)
        .collect())
}

fn check_t(t: usize, sched: &NoiseSchedule) -> Result<()> {
    if t == 0 || t > sched.t_diff {
        return Err(Error::Config(format!("diffusion step {t} outside 1..={}", sched.t_diff)));
    }
    Ok(())
}

/// Reverse step `τᵗ⁻¹ = μ + √Σᵗ·z` with
/// `μ = (τᵗ − (1−α_t)/√(1−ᾱ_t)·ε̂)/√α_t`.
pub fn posterior_step<R: Rng>(
    tau: &[f32],
    eps_hat: &[f32],
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f32>> {
    if tau.len() != eps_hat.len() {
        return Err(Error::Shape("τᵗ and ε̂ differ in size".into()));
    }
    check_t(t, sched)?;
    let inv_sqrt_a = 1.0 / sched.alpha[t].sqrt();
    let coef = (1.0 - sched.alpha[t]) / (1.0 - sched.alpha_bar[t]).sqrt();
    let sd = sched.sigma2[t].sqrt();
    Ok(tau
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| {
            let mu = inv_sqrt_a * (*x as f64 - coef * *e as f64);
            let z: f64 = if sd > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
            (mu + sd * z) as f32
        })
        .collect())
}

/// Overwrites rows 0 and `L−1` of an `L × d` trajectory with `s` and `g`.
pub fn condition_endpoints(tau: &mut [f32], s: &StateRow, g: &StateRow) -> Result<()> {
    let len = tau.len() / STATE_DIM;
    if len < 2 || !tau.len().is_multiple_of(STATE_DIM) {
        return Err(Error::Shape(format!("trajectory of {len} rows cannot hold both endpoints")));
    }
    tau[..STATE_DIM].copy_from_slice(s);
    tau[(len - 1) * STATE_DIM..].copy_from_slice(g);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserArch {
    pub channels: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub groups: usize,
    pub time_dim: usize,
    /// Dilation per residual block, cycled when shorter than `blocks`.
    pub dilations: Vec<usize>,
    /// Feed the first and last rows to every position as extra input
    /// channels, together with the relative index `i/(L−1)`.
    pub endpoint_channels: bool,
    pub seed: u64,
}

impl Default for DenoiserArch {
    fn default() -> Self {
        DenoiserArch {
            channels: 64,
            blocks: 6,
            kernel: 5,
            groups: 8,
            time_dim: 32,
            dilations: vec![1, 2, 4, 8, 16, 32],
            endpoint_channels: true,
            seed: 0,
        }
    }
}

impl DenoiserArch {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0
            || self.groups == 0
            || !self.channels.is_multiple_of(self.groups)
            || self.kernel.is_multiple_of(2)
            || self.time_dim < 2
            || self.dilations.contains(&0)
        {
            return Err(Error::Config(
                "denoiser needs groups dividing channels, an odd kernel, time_dim ≥ 2 and positive dilations".into(),
            ));
        }
        Ok(())
    }

    fn input_channels(&self) -> usize {
        if self.endpoint_channels {
            3 * STATE_DIM + 1
        } else {
            STATE_DIM
        }
    }

    fn dilation(&self, block: usize) -> usize {
        if self.dilations.is_empty() {
            1
        } else {
            self.dilations[block % self.dilations.len()]
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv1d,
    norm1: GroupNorm,
    conv2: Conv1d,
    norm2: GroupNorm,
    time: Linear,
}

/// Temporal residual network `ε_θ(τ, t)` over `L × d` inputs.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub arch: DenoiserArch,
    t1: Linear,
    t2: Linear,
    input: Conv1d,
    blocks: Vec<Block>,
    output: Conv1d,
}

struct BlockCache<T> {
    cols1: Vec<T>,
    norm1: NormCache<T>,
    pre1: Vec<T>,
    cols2: Vec<T>,
    norm2: NormCache<T>,
    pre2: Vec<T>,
}

pub struct DenoiserCache<T> {
    len: usize,
    padded: usize,
    emb: Vec<T>,
    a1: Vec<T>,
    s1: Vec<T>,
    temb: Vec<T>,
    st: Vec<T>,
    cols_in: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    cols_out: Vec<T>,
}

/// Row-major `rows × cols` transpose.
fn transpose<T: Copy>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(x[r * cols + c]);
        }
    }
    out
}

impl Denoiser {
    pub fn new(arch: DenoiserArch, ps: &mut ParamStore) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::seeded(rng::derive(arch.seed, "denoiser-init"));
        let (c, k, td) = (arch.channels, arch.kernel, arch.time_dim);
        let t1 = Linear::new(ps, "time1", td, 2 * td, &mut r);
        let t2 = Linear::new(ps, "time2", 2 * td, td, &mut r);
        let input = Conv1d::new(ps, "in", arch.input_channels(), c, k, 1, &mut r);
        let blocks = (0..arch.blocks)
            .map(|b| {
                let d = arch.dilation(b);
                Block {
                    conv1: Conv1d::new(ps, &format!("b{b}.conv1"), c, c, k, d, &mut r),
                    norm1: GroupNorm::new(ps, &format!("b{b}.gn1"), c, arch.groups),
                    conv2: Conv1d::new(ps, &format!("b{b}.conv2"), c, c, k, d, &mut r),
                    norm2: GroupNorm::new(ps, &format!("b{b}.gn2"), c, arch.groups),
                    time: Linear::new(ps, &format!("b{b}.time"), td, c, &mut r),
                }
            })
            .collect();
        let output = Conv1d::new(ps, "out", c, STATE_DIM, 1, 1, &mut r);
        Ok(Denoiser {
            arch,
            t1,
            t2,
            input,
            blocks,
            output,
        })
    }

    /// Predicted noise for an `L × d` trajectory at step `t`.
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, tau: &[T], t: usize) -> (Vec<T>, DenoiserCache<T>) {
        let len = tau.len() / STATE_DIM;
        let mut x = transpose(tau, len, STATE_DIM);
        if self.arch.endpoint_channels {
            let last = (len - 1) * STATE_DIM;
            for c in 0..STATE_DIM {
                x.extend(std::iter::repeat_n(tau[c], len));
            }
            for c in 0..STATE_DIM {
                x.extend(std::iter::repeat_n(tau[last + c], len));
            }
            let denom = (len - 1).max(1) as f64;
            x.extend((0..len).map(|i| T::of(i as f64 / denom)));
        }
        let in_ch = self.arch.input_channels();
        let (xp, padded) = reflect_pad(&x, in_ch, len, 4);
        let emb: Vec<T> = sinusoidal(t as f64, self.arch.time_dim)
            .into_iter()
            .map(T::of)
            .collect();
        let a1 = self.t1.forward(ps, &emb, 1);
        let s1 = silu(&a1);
        let temb = self.t2.forward(ps, &s1, 1);
        let st = silu(&temb);
        let (mut h, cols_in) = self.input.forward(ps, &xp, padded);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (c1, cols1) = b.conv1.forward(ps, &h, padded);
            let (pre1, norm1) = b.norm1.forward(ps, &c1, padded);
            let mut a = silu(&pre1);
            let shift = b.time.forward(ps, &st, 1);
            for (row, s) in a.chunks_exact_mut(padded).zip(&shift) {
                for v in row {
                    *v += *s;
                }
            }
            let (c2, cols2) = b.conv2.forward(ps, &a, padded);
            let (pre2, norm2) = b.norm2.forward(ps, &c2, padded);
            for (hv, r) in h.iter_mut().zip(silu(&pre2)) {
                *hv += r;
            }
            caches.push(BlockCache {
                cols1,
                norm1,
                pre1,
                cols2,
                norm2,
                pre2,
            });
        }
        let (out, cols_out) = self.output.forward(ps, &h, padded);
        let y = transpose(&crop(&out, STATE_DIM, padded, len), STATE_DIM, len);
        let cache = DenoiserCache {
            len,
            padded,
            emb,
            a1,
            s1,
            temb,
            st,
            cols_in,
            blocks: caches,
            cols_out,
        };
        (y, cache)
    }

    /// Accumulates parameter gradients for upstream gradient `dy` (`L × d`).
    /// Returns the gradient with respect to the input trajectory.
    pub fn backward<T: Real>(&self, ps: &mut ParamStore<T>, cache: &DenoiserCache<T>, dy: &[T]) -> Vec<T> {
        let (len, padded) = (cache.len, cache.padded);
        let d_out = crop_backward(&transpose(dy, len, STATE_DIM), STATE_DIM, padded, len);
        let mut dh = self
            .output
            .backward(ps, &cache.cols_out, padded, &d_out, true)
            .expect("dx requested");
        let mut dst = vec![T::zero(); self.arch.time_dim];
        for (b, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let dpre2 = silu_backward(&bc.pre2, &dh);
            let dc2 = b.norm2.backward(ps, &bc.norm2, padded, &dpre2);
            let da = b.conv2.backward(ps, &bc.cols2, padded, &dc2, true).expect("dx requested");
            let dshift: Vec<T> = da.chunks_exact(padded).map(|r| r.iter().copied().sum()).collect();
            let ds = b.time.backward(ps, &cache.st, 1, &dshift, true).expect("dx requested");
            for (acc, v) in dst.iter_mut().zip(ds) {
                *acc += v;
            }
            let dpre1 = silu_backward(&bc.pre1, &da);
            let dc1 = b.norm1.backward(ps, &bc.norm1, padded, &dpre1);
            let dhb = b.conv1.backward(ps, &bc.cols1, padded, &dc1, true).expect("dx requested");
            for (acc, v) in dh.iter_mut().zip(dhb) {
                *acc += v;
            }
        }
        let dxp = self
            .input
            .backward(ps, &cache.cols_in, padded, &dh, true)
            .expect("dx requested");
        let dtemb = silu_backward(&cache.temb, &dst);
        let ds1 = self.t2.backward(ps, &cache.s1, 1, &dtemb, true).expect("dx requested");
        let da1 = silu_backward(&cache.a1, &ds1);
        self.t1.backward(ps, &cache.emb, 1, &da1, false);
        let dx = reflect_pad_backward(&dxp, self.arch.input_channels(), len, padded);
        let mut dtau = transpose(&dx[..STATE_DIM * len], STATE_DIM, len);
        if self.arch.endpoint_channels {
            let last = (len - 1) * STATE_DIM;
            for c in 0..STATE_DIM {
                let ds: T = dx[(STATE_DIM + c) * len..(STATE_DIM + c + 1) * len].iter().copied().sum();
                let dg: T = dx[(2 * STATE_DIM + c) * len..(2 * STATE_DIM + c + 1) * len].iter().copied().sum();
                dtau[c] += ds;
                dtau[last + c] += dg;
            }
        }
        dtau
    }
}

/// One noised training crop.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyCrop {
    /// `τᵗ`, `L × d`.
    pub tau_t: Vec<f32>,
    pub eps: Vec<f32>,
    pub t: usize,
    /// Endpoint rows hold clean values and are left out of the loss.
    pub clean_ends: bool,
    /// Per-crop loss weight.
    pub weight: f64,
}

/// Mean squared error between predicted and injected noise over all noised
/// elements of a batch of crops. Clean endpoint rows have no noise to predict
/// and are skipped.
pub struct EpsObjective<'a> {
    pub net: &'a Denoiser,
}

impl Objective for EpsObjective<'_> {
    type Batch = Vec<NoisyCrop>;

    fn loss<T: Real>(&self, params: &ParamStore<T>, batch: &Vec<NoisyCrop>) -> Result<f64> {
        let mut sum = 0.0;
        for c in batch {
            let x: Vec<T> = c.tau_t.iter().map(|v| T::of(*v as f64)).collect();
            let (y, _) = self.net.forward(params, &x, c.t);
            sum += c.weight
                * c.noised()
                    .map(|i| (y[i].f64() - c.eps[i] as f64).powi(2))
                    .sum::<f64>();
        }
        finite("L_eps", sum / interior_count(batch).max(1) as f64)
    }

    fn loss_and_grad<T: Real>(&self, params: &mut ParamStore<T>, batch: &Vec<NoisyCrop>) -> Result<f64> {
        let total = interior_count(batch).max(1) as f64;
        let mut sum = 0.0;
        for c in batch {
            let x: Vec<T> = c.tau_t.iter().map(|v| T::of(*v as f64)).collect();
            let (y, cache) = self.net.forward(params, &x, c.t);
            let mut dy = vec![T::zero(); y.len()];
            for i in c.noised() {
                let r = y[i].f64() - c.eps[i] as f64;
                sum += c.weight * r * r;
                dy[i] = T::of(2.0 * c.weight * r / total);
            }
            self.net.backward(params, &cache, &dy);
        }
        finite("L_eps", sum / total)
    }
}

impl NoisyCrop {
    fn noised(&self) -> std::ops::Range<usize> {
        let n = self.eps.len();
        if self.clean_ends {
            STATE_DIM..n.saturating_sub(STATE_DIM).max(STATE_DIM)
        } else {
            0..n
        }
    }
}

fn interior_count(batch: &[NoisyCrop]) -> usize {
    batch.iter().map(|c| c.noised().len()).sum()
}

/// Crop policy of planner training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CropMode {
    /// Lengths drawn uniformly from `l_min..=t_max`.
    Variable { l_min: usize, t_max: usize },
    /// Every crop has length `h`.
    Fixed { h: usize },
}

impl CropMode {
    pub fn bounds(&self) -> (usize, usize) {
        match *self {
            CropMode::Variable { l_min, t_max } => (l_min, t_max),
            CropMode::Fixed { h } => (h, h),
        }
    }
}

/// Draws crop lengths first, then an episode long enough to hold them, so
/// lengths are uniform over the admissible range.
pub struct CropSampler<'a> {
    data: &'a NormalizedDataset,
    /// Episode indices sorted by length.
    by_len: Vec<usize>,
    lo: usize,
    hi: usize,
}

impl<'a> CropSampler<'a> {
    /// Lengths above the longest episode are dropped from the range.
    pub fn new(data: &'a NormalizedDataset, mode: CropMode) -> Result<Self> {
        let (lo, hi) = mode.bounds();
        if lo < 2 || lo > hi {
            return Err(Error::Config(format!("invalid crop range {lo}..={hi}")));
        }
        let mut by_len: Vec<usize> = (0..data.len()).collect();
        by_len.sort_by_key(|&i| (data.episodes[i].len(), i));
        let longest = by_len.last().map(|&i| data.episodes[i].len()).unwrap_or(0);
        if longest < lo {
            return Err(Error::EpisodeTooShort { len: longest, min: lo });
        }
        Ok(CropSampler {
            data,
            by_len,
            lo,
            hi: hi.min(longest),
        })
    }

    pub fn range(&self) -> (usize, usize) {
        (self.lo, self.hi)
    }

    /// Returns `(episode, start, len)`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (usize, usize, usize) {
        let len = rng.random_range(self.lo..=self.hi);
        let first = self.by_len.partition_point(|&i| self.data.episodes[i].len() < len);
        let ep = self.by_len[rng.random_range(first..self.by_len.len())];
        let start = rng.random_range(0..=self.data.episodes[ep].len() - len);
        (ep, start, len)
    }

    pub fn crop<R: Rng>(&self, rng: &mut R) -> Vec<f32> {
        let (ep, start, len) = self.sample(rng);
        self.data.episodes[ep][start..start + len]
            .iter()
            .flat_map(|r| r.iter().copied())
            .collect()
    }
}

fn gaussian<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Per-step weight on the noise-prediction error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossWeighting {
    Uniform,
    /// `clamp(1/SNR_t, 1, max)` with `SNR_t = ᾱ_t/(1−ᾱ_t)`: at high noise the
    /// error counts as the implied clean-trajectory error.
    InverseSnr { max: f64 },
}

impl LossWeighting {
    pub fn weight(&self, sched: &NoiseSchedule, t: usize) -> f64 {
        match *self {
            LossWeighting::Uniform => 1.0,
            LossWeighting::InverseSnr { max } => {
                let a = sched.alpha_bar[t];
                ((1.0 - a) / a.max(1e-12)).clamp(1.0, max.max(1.0))
            }
        }
    }
}

/// How plan endpoints are imposed during sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointMode {
    /// Clean `s`, `g` after every reverse step; training crops get the same
    /// clean endpoint rows.
    Clean,
    /// Endpoints noised to the level of the next step (clean at the last
    /// one); training crops are noised uniformly.
    Renoised,
}

/// Draws a batch of noised crops. In `Clean` mode the endpoint rows are
/// reset to their clean values, matching what the sampler feeds the network.
pub fn sample_noisy_batch<R: Rng>(
    sampler: &CropSampler,
    sched: &NoiseSchedule,
    batch: usize,
    mode: EndpointMode,
    weighting: LossWeighting,
    rng: &mut R,
) -> Result<Vec<NoisyCrop>> {
    (0..batch)
        .map(|_| {
            let tau0 = sampler.crop(rng);
            let t = rng.random_range(1..=sched.t_diff);
            let eps = gaussian(rng, tau0.len());
            let mut tau_t = q_sample(&tau0, t, &eps, sched)?;
            let clean_ends = mode == EndpointMode::Clean;
            if clean_ends {
                let last = tau0.len() - STATE_DIM;
                tau_t[..STATE_DIM].copy_from_slice(&tau0[..STATE_DIM]);
                tau_t[last..].copy_from_slice(&tau0[last..]);
            }
            Ok(NoisyCrop {
                tau_t,
                eps,
                t,
                clean_ends,
                weight: weighting.weight(sched, t),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerTrainCfg {
    pub arch: DenoiserArch,
    pub t_diff: usize,
    pub batch: usize,
    pub steps: usize,
    pub adam: AdamCfg,
    pub ema_rho: f64,
    pub crop: CropMode,
    pub seed: u64,
    pub log_every: usize,
    /// Range the implied clean trajectory is clipped to during sampling;
    /// `None` keeps the plain noise-prediction update.
    pub clip_denoised: Option<[f32; 2]>,
    pub endpoints: EndpointMode,
    pub loss_weighting: LossWeighting,
}

impl Default for PlannerTrainCfg {
    fn default() -> Self {
        PlannerTrainCfg {
            arch: DenoiserArch::default(),
            t_diff: 100,
            batch: 32,
            steps: 200_000,
            adam: AdamCfg::with_lr(2e-4),
            ema_rho: 0.995,
            crop: CropMode::Variable { l_min: 16, t_max: 192 },
            seed: 0,
            log_every: 500,
            clip_denoised: Some([0.0, 1.0]),
            endpoints: EndpointMode::Clean,
            loss_weighting: LossWeighting::Uniform,
        }
    }
}

/// Replaces `ε̂` by the noise implied by the clipped clean estimate
/// `τ̂⁰ = (τᵗ − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn clip_eps(tau: &[f32], eps_hat: &mut [f32], t: usize, sched: &NoiseSchedule, range: [f32; 2]) {
    let a = sched.alpha_bar[t].sqrt();
    let b = (1.0 - sched.alpha_bar[t]).sqrt();
    for (x, e) in tau.iter().zip(eps_hat.iter_mut()) {
        let x0 = ((*x as f64 - b * *e as f64) / a).clamp(range[0] as f64, range[1] as f64);
        *e = ((*x as f64 - a * x0) / b) as f32;
    }
}

/// Denoiser, its weights and schedule, ready for sampling.
#[derive(Clone, Debug)]
pub struct Planner {
    pub cfg: PlannerTrainCfg,
    pub net: Denoiser,
    pub params: ParamStore,
    pub sched: NoiseSchedule,
}

#[derive(Clone, Debug, Serialize)]
pub struct PlannerLogRow {
    pub step: usize,
    pub loss: f64,
}

pub struct PlannerTrained {
    pub planner: Planner,
    pub ema: EmaStore,
    pub log: Vec<PlannerLogRow>,
    pub rejected_steps: usize,
}

impl PlannerTrained {
    /// Planner whose weights are the EMA shadow.
    pub fn ema_planner(&self) -> Planner {
        let mut p = self.planner.clone();
        p.params = self.ema.params().clone();
        p
    }
}

impl Planner {
    pub fn new(cfg: PlannerTrainCfg) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Denoiser::new(cfg.arch.clone(), &mut params)?;
        let sched = cosine_schedule(cfg.t_diff)?;
        Ok(Planner {
            cfg,
            net,
            params,
            sched,
        })
    }

    pub fn length_bounds(&self) -> (usize, usize) {
        self.cfg.crop.bounds()
    }

    pub fn predict_eps(&self, tau: &[f32], t: usize) -> Vec<f32> {
        self.net.forward(&self.params, tau, t).0
    }

    /// Samples an `len × d` plan from `s` to `g`: Gaussian start, then for
    /// `t = T..1` a reverse step followed by setting both endpoint rows
    /// (clean after the final step in every mode).
    pub fn plan<R: Rng>(&self, s: &StateRow, g: &StateRow, len: usize, rng: &mut R) -> Result<Plan> {
        if len < 2 {
            return Err(Error::Shape(format!("plan length {len} below 2")));
        }
        let mut tau = gaussian(rng, len * STATE_DIM);
        for t in (1..=self.sched.t_diff).rev() {
            let mut eps = self.predict_eps(&tau, t);
            if let Some(range) = self.cfg.clip_denoised {
                clip_eps(&tau, &mut eps, t, &self.sched, range);
            }
            tau = posterior_step(&tau, &eps, t, &self.sched, rng)?;
            match self.cfg.endpoints {
                EndpointMode::Renoised if t > 1 => {
                    let a = self.sched.alpha_bar[t - 1];
                    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
                    let z = gaussian(rng, 2 * STATE_DIM);
                    let noisy = |x: &StateRow, z: &[f32]| -> StateRow {
                        std::array::from_fn(|i| (sa * x[i] as f64 + sb * z[i] as f64) as f32)
                    };
                    condition_endpoints(&mut tau, &noisy(s, &z[..STATE_DIM]), &noisy(g, &z[STATE_DIM..]))?;
                }
                _ => condition_endpoints(&mut tau, s, g)?,
            }
            if tau.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("plan at reverse step {t}")));
            }
        }
        Ok(Plan {
            states: tau.chunks_exact(STATE_DIM).map(|r| [r[0], r[1], r[2], r[3]]).collect(),
            start: *s,
            goal: *g,
        })
    }

    pub fn to_checkpoint(&self, ema: Option<&EmaStore>) -> Result<Checkpoint> {
        let config = serde_json::to_string(&self.cfg)
            .map_err(|e| Error::Config(format!("serializing planner config: {e}")))?;
        let mut ck = Checkpoint::new(config);
        ck.push_store("net", &self.params);
        if let Some(ema) = ema {
            ck.push_store("ema", ema.params());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint, use_ema: bool) -> Result<Self> {
        let cfg: PlannerTrainCfg = serde_json::from_str(&ck.config)
            .map_err(|e| Error::Config(format!("planner config echo: {e}")))?;
        let mut planner = Planner::new(cfg)?;
        let first = planner.params.ids().next().map(|id| planner.params.name(id).to_string());
        let has_ema = first.is_some_and(|n| ck.get(&format!("ema/{n}")).is_ok());
        ck.load_store(if use_ema && has_ema { "ema" } else { "net" }, &mut planner.params)?;
        Ok(planner)
    }

    pub fn save(&self, path: &Path, ema: Option<&EmaStore>) -> Result<()> {
        self.to_checkpoint(ema)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Planner::from_checkpoint(&Checkpoint::load(path)?, true)
    }
}

/// Sampled trajectory in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub states: Vec<StateRow>,
    pub start: StateRow,
    pub goal: StateRow,
}

impl Plan {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Runs Adam on the ε-loss for `cfg.steps` steps. `on_log` sees every logged
/// row; `on_checkpoint` is called with the step count every
/// `checkpoint_every` steps when that is nonzero.
pub fn train_planner(
    data: &NormalizedDataset,
    cfg: &PlannerTrainCfg,
    checkpoint_every: usize,
    mut on_log: impl FnMut(&PlannerLogRow),
    mut on_checkpoint: impl FnMut(usize, &Planner, &EmaStore) -> Result<()>,
) -> Result<PlannerTrained> {
    let mut planner = Planner::new(cfg.clone())?;
    let sampler = CropSampler::new(data, cfg.crop)?;
    let mut ema = EmaStore::new(&planner.params, cfg.ema_rho);
    let mut opt = OptimState::new(&planner.params, cfg.adam);
    let mut r = rng::seeded(rng::derive(cfg.seed, "planner-train"));
    let mut log = Vec::new();
    let (mut acc, mut acc_n, mut rejected) = (0.0, 0usize, 0usize);
    for step in 1..=cfg.steps {
        let batch = sample_noisy_batch(&sampler, &planner.sched, cfg.batch, cfg.endpoints, cfg.loss_weighting, &mut r)?;
        let objective = EpsObjective { net: &planner.net };
        let loss = match value_and_grad(&objective, &mut planner.params, &batch)
            .and_then(|l| adam_step(&mut planner.params, &mut opt).map(|_| l))
        {
            Ok(l) => l,
            Err(Error::NonFinite(term)) => {
                log::warn!("planner step {step}: non-finite {term}, step rejected");
                rejected += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        ema.update(&planner.params)?;
        acc += loss;
        acc_n += 1;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            let row = PlannerLogRow {
                step,
                loss: acc / acc_n.max(1) as f64,
            };
            on_log(&row);
            log.push(row);
            acc = 0.0;
            acc_n = 0;
        }
        if checkpoint_every > 0 && step % checkpoint_every == 0 {
            on_checkpoint(step, &planner, &ema)?;
        }
    }
    Ok(PlannerTrained {
        planner,
        ema,
        log,
        rejected_steps: rejected,
    })
}
