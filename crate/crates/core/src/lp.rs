//! Length predictor: a learned estimate of the normalized shortest-step
//! distance between two states, trained from offline episodes with anchor,
//! Bellman-bound and relay-bound supervision, plus the horizon rule built on it.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{NormalizedDataset, StateRow};
use crate::error::{Error, Result};
use crate::maze::{GoalSpec, STATE_DIM};
use crate::nn::layers::{relu, relu_backward, sigmoid, softplus, LayerNorm, Linear, NormCache};
use crate::nn::{
    adam_step, finite, value_and_grad, AdamCfg, Checkpoint, EmaStore, Objective, OptimState,
    ParamStore, Real,
};
use crate::rng;

/// Normalized value of zero velocity; masked goal dimensions are set to it.
pub const REST_VELOCITY: f32 = 0.5;

/// Pair evaluations are chunked to bound scratch memory.
const EVAL_CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LpArch {
    /// Random Fourier frequencies `F`; the feature map has `2F + d` entries.
    pub rff_features: usize,
    pub rff_sigma: f64,
    pub hidden: usize,
    pub depth: usize,
    /// Step count that maps to a normalized distance of 1.
    pub t_max: usize,
    /// Goal tolerance in normalized units.
    pub eps: f64,
    /// Dimensions that define goal membership. Unmasked goal dimensions are
    /// replaced by [`REST_VELOCITY`] before they reach the network.
    pub goal_mask: [bool; STATE_DIM],
    pub seed: u64,
}

impl Default for LpArch {
    fn default() -> Self {
        LpArch {
            rff_features: 128,
            rff_sigma: 1.0,
            hidden: 256,
            depth: 3,
            t_max: 192,
            eps: 0.04,
            goal_mask: GoalSpec::POSITION_MASK,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cons: f64,
    pub tri: f64,
    pub bdry: f64,
    pub clip: f64,
    /// Huber threshold.
    pub kappa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cons: 1.0,
            tri: 0.5,
            bdry: 0.1,
            clip: 0.1,
            kappa: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCfg {
    pub steps: usize,
    /// Goal mixture: endpoint, local future, global pool.
    pub mixture: [f64; 3],
    /// Lookahead set for pairs without a goal hit.
    pub k_set: Vec<usize>,
    pub relay_prob: f64,
    pub semi_hard: bool,
    /// Multipliers applied to `(λ_cons, λ_△)` once the entry ramp completes.
    pub lambda_scale: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumCfg {
    pub phases: Vec<PhaseCfg>,
    pub ramp_steps: usize,
    pub batch: usize,
    /// Candidates scored per semi-hard relay.
    pub mine_candidates: usize,
}

impl Default for CurriculumCfg {
    fn default() -> Self {
        CurriculumCfg {
            phases: vec![
                PhaseCfg {
                    steps: 10_000,
                    mixture: [0.1, 0.8, 0.1],
                    k_set: vec![1, 2],
                    relay_prob: 0.0,
                    semi_hard: false,
                    lambda_scale: [0.0, 0.0],
                },
                PhaseCfg {
                    steps: 20_000,
                    mixture: [0.2, 0.5, 0.3],
                    k_set: vec![1, 2, 4, 8],
                    relay_prob: 0.3,
                    semi_hard: false,
                    lambda_scale: [1.0, 1.0],
                },
                PhaseCfg {
                    steps: 20_000,
                    mixture: [0.3, 0.3, 0.4],
                    k_set: vec![1, 2, 4, 8],
                    relay_prob: 0.6,
                    semi_hard: true,
                    lambda_scale: [1.0, 1.0],
                },
            ],
            ramp_steps: 2_000,
            batch: 256,
            mine_candidates: 16,
        }
    }
}

impl CurriculumCfg {
    /// Rescales every phase so the phases sum to `total` steps, keeping their
    /// proportions.
    pub fn with_total_steps(mut self, total: usize) -> Self {
        let old: usize = self.phases.iter().map(|p| p.steps).sum();
        if old > 0 {
            let mut used = 0;
            let n = self.phases.len();
            for (i, p) in self.phases.iter_mut().enumerate() {
                p.steps = if i + 1 == n {
                    total - used
                } else {
                    total * p.steps / old
                };
                used += p.steps;
            }
            self.ramp_steps = self.ramp_steps * total / old;
        }
        self
    }

    /// Anchor-only training: the first phase's sampling for the whole run, no
    /// bound terms.
    pub fn anchors_only(&self) -> Self {
        let total = self.phases.iter().map(|p| p.steps).sum();
        let mut first = self.phases[0].clone();
        first.steps = total;
        first.relay_prob = 0.0;
        first.semi_hard = false;
        first.lambda_scale = [0.0, 0.0];
        CurriculumCfg {
            phases: vec![first],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() || self.batch == 0 {
            return Err(Error::Config("curriculum needs phases and a batch size".into()));
        }
        for (i, p) in self.phases.iter().enumerate() {
            let sum: f64 = p.mixture.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || p.mixture.iter().any(|w| *w < 0.0) {
                return Err(Error::Config(format!("phase {i}: goal mixture must sum to 1")));
            }
            if p.k_set.is_empty() || !(0.0..=1.0).contains(&p.relay_prob) {
                return Err(Error::Config(format!("phase {i}: bad lookahead set or relay probability")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HorizonCfg {
    pub gamma: f64,
    pub l_min: usize,
    pub t_max: usize,
}

impl Default for HorizonCfg {
    fn default() -> Self {
        HorizonCfg {
            gamma: 1.15,
            l_min: 16,
            t_max: 192,
        }
    }
}

impl HorizonCfg {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || self.l_min < 1 || self.l_min > self.t_max {
            return Err(Error::Config("horizon needs γ > 0 and 1 ≤ L_min ≤ T_max".into()));
        }
        Ok(())
    }
}

/// `clamp(⌊γ·(f·T_max + 1) + ½⌋, L_min, T_max)`.
pub fn horizon_from_distance(f: f64, hc: &HorizonCfg) -> usize {
    let raw = (hc.gamma * (f * hc.t_max as f64 + 1.0) + 0.5).floor();
    if raw.is_nan() {
        return hc.t_max;
    }
    (raw.max(0.0).min(hc.t_max as f64) as usize).clamp(hc.l_min, hc.t_max)
}

/// Fixed random Fourier feature map `Φ(x) = [sin 2πxB, cos 2πxB, x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RffEncoder {
    /// `d × F`, row-major.
    b: Vec<f32>,
    features: usize,
}

impl RffEncoder {
    pub fn new<R: Rng>(features: usize, sigma: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        let b = (0..STATE_DIM * features)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        RffEncoder { b, features }
    }

    pub fn from_matrix(b: Vec<f32>, features: usize) -> Result<Self> {
        if b.len() != STATE_DIM * features {
            return Err(Error::Shape(format!("RFF matrix has {} entries", b.len())));
        }
        Ok(RffEncoder { b, features })
    }

    pub fn matrix(&self) -> &[f32] {
        &self.b
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn dim(&self) -> usize {
        2 * self.features + STATE_DIM
    }

    pub fn encode_into(&self, x: &StateRow, out: &mut [f32]) {
        let f = self.features;
        let tau = std::f64::consts::TAU;
        for j in 0..f {
            let mut p = 0.0f64;
            for (i, xi) in x.iter().enumerate() {
                p += *xi as f64 * self.b[i * f + j] as f64;
            }
            let (s, c) = (tau * p).sin_cos();
            out[j] = s as f32;
            out[f + j] = c as f32;
        }
        out[2 * f..2 * f + STATE_DIM].copy_from_slice(x);
    }

    pub fn encode(&self, x: &StateRow) -> Vec<f32> {
        let mut out = vec![0.0; self.dim()];
        self.encode_into(x, &mut out);
        out
    }
}

/// MLP `z ↦ a` with normalization and ReLU after each hidden layer; the
/// predicted distance is `softplus(a)`.
#[derive(Clone, Debug)]
pub struct LpNet {
    hidden: Vec<(Linear, LayerNorm)>,
    head: Linear,
    phi_dim: usize,
}

pub struct NetCache<T> {
    inputs: Vec<Vec<T>>,
    norms: Vec<NormCache<T>>,
    normed: Vec<Vec<T>>,
    last: Vec<T>,
}

impl LpNet {
    pub fn new<R: Rng>(ps: &mut ParamStore, phi_dim: usize, hidden: usize, depth: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(depth);
        let mut width = 3 * phi_dim;
        for i in 0..depth {
            let lin = Linear::new(ps, &format!("l{i}"), width, hidden, rng);
            let ln = LayerNorm::new(ps, &format!("n{i}"), hidden);
            layers.push((lin, ln));
            width = hidden;
        }
        let head = Linear::new(ps, "head", width, 1, rng);
        LpNet {
            hidden: layers,
            head,
            phi_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        3 * self.phi_dim
    }

    pub fn head(&self) -> Linear {
        self.head
    }

    /// Pre-softplus outputs for `n` rows of `z`.
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, z: &[T], n: usize) -> (Vec<T>, NetCache<T>) {
        let mut cache = NetCache {
            inputs: Vec::new(),
            norms: Vec::new(),
            normed: Vec::new(),
            last: Vec::new(),
        };
        let mut x = z.to_vec();
        for (lin, ln) in &self.hidden {
            let pre = lin.forward(ps, &x, n);
            let (y, nc) = ln.forward(ps, &pre, n);
            let next = relu(&y);
            cache.inputs.push(std::mem::replace(&mut x, next));
            cache.norms.push(nc);
            cache.normed.push(y);
        }
        let a = self.head.forward(ps, &x, n);
        cache.last = x;
        (a, cache)
    }

    pub fn backward<T: Real>(&self, ps: &mut ParamStore<T>, cache: &NetCache<T>, n: usize, da: &[T]) {
        let mut d = self
            .head
            .backward(ps, &cache.last, n, da, !self.hidden.is_empty())
            .unwrap_or_default();
        for (i, (lin, ln)) in self.hidden.iter().enumerate().rev() {
            let dy = relu_backward(&cache.normed[i], &d);
            let dpre = ln.backward(ps, &cache.norms[i], n, &dy);
            match lin.backward(ps, &cache.inputs[i], n, &dpre, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    /// Distances `softplus(a)` for index pairs into `phis` (`n_states × P`),
    /// splitting the first layer as `W·[Φs, Φg, Φs−Φg] = (Wa+Wc)Φs + (Wb−Wc)Φg`
    /// so each state is projected once.
    pub fn eval_pairs(&self, ps: &ParamStore, phis: &[f32], pairs: &[(usize, usize)]) -> Vec<f32> {
        if pairs.is_empty() {
            return Vec::new();
        }
        let p = self.phi_dim;
        let n_states = phis.len() / p;
        let Some(((first, first_ln), rest)) = self.hidden.split_first() else {
            // No hidden layer: evaluate the head on explicit z rows.
            let z = pair_features(phis, p, pairs);
            let (a, _) = self.forward(ps, &z, pairs.len());
            return a.into_iter().map(softplus).collect();
        };
        let h = first.fan_out;
        let w = ps.value(first.w);
        let mut wu = vec![0.0f32; h * p];
        let mut wv = vec![0.0f32; h * p];
        for r in 0..h {
            let row = &w[r * 3 * p..(r + 1) * 3 * p];
            for j in 0..p {
                wu[r * p + j] = row[j] + row[2 * p + j];
                wv[r * p + j] = row[p + j] - row[2 * p + j];
            }
        }
        let mut u = vec![0.0f32; n_states * h];
        let mut v = vec![0.0f32; n_states * h];
        crate::nn::gemm(n_states, p, h, phis, false, &wu, true, &mut u, false);
        crate::nn::gemm(n_states, p, h, phis, false, &wv, true, &mut v, false);
        let bias = ps.value(first.b);
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(EVAL_CHUNK) {
            let n = chunk.len();
            let mut pre = vec![0.0f32; n * h];
            for (r, &(a, b)) in chunk.iter().enumerate() {
                let row = &mut pre[r * h..(r + 1) * h];
                for j in 0..h {
                    row[j] = u[a * h + j] + v[b * h + j] + bias[j];
                }
            }
            let (y, _) = first_ln.forward(ps, &pre, n);
            let mut x = relu(&y);
            for (lin, ln) in rest {
                let pre = lin.forward(ps, &x, n);
                x = relu(&ln.forward(ps, &pre, n).0);
            }
            out.extend(self.head.forward(ps, &x, n).into_iter().map(softplus));
        }
        out
    }
}

/// Rows `[Φs, Φg, Φs−Φg]` for index pairs into `phis`.
fn pair_features<T: Real>(phis: &[f32], p: usize, pairs: &[(usize, usize)]) -> Vec<T> {
    let mut z = Vec::with_capacity(pairs.len() * 3 * p);
    for &(a, b) in pairs {
        let (pa, pb) = (&phis[a * p..(a + 1) * p], &phis[b * p..(b + 1) * p]);
        z.extend(pa.iter().map(|v| T::of(*v as f64)));
        z.extend(pb.iter().map(|v| T::of(*v as f64)));
        z.extend(pa.iter().zip(pb).map(|(x, y)| T::of((*x - *y) as f64)));
    }
    z
}

/// Trained or freshly initialized length predictor.
#[derive(Clone, Debug)]
pub struct LpModel {
    pub arch: LpArch,
    pub rff: RffEncoder,
    pub net: LpNet,
    pub params: ParamStore,
}

impl LpModel {
    pub fn new(arch: LpArch) -> Self {
        let mut r = rng::seeded(rng::derive(arch.seed, "lp-init"));
        let rff = RffEncoder::new(arch.rff_features, arch.rff_sigma, &mut r);
        let mut params = ParamStore::new();
        let net = LpNet::new(&mut params, rff.dim(), arch.hidden, arch.depth, &mut r);
        LpModel {
            arch,
            rff,
            net,
            params,
        }
    }

    /// Replaces masked-out goal dimensions by the rest value.
    pub fn canonical_goal(&self, g: &StateRow) -> StateRow {
        canonical_goal(g, &self.arch.goal_mask)
    }

    fn encode_all(&self, states: &[StateRow]) -> Vec<f32> {
        let p = self.rff.dim();
        let mut phis = vec![0.0f32; states.len() * p];
        for (x, out) in states.iter().zip(phis.chunks_exact_mut(p)) {
            self.rff.encode_into(x, out);
        }
        phis
    }

    /// Distances for index pairs into `states` under `params` (the live or
    /// EMA weights). The second index of each pair is used as a goal as is.
    pub fn eval_indexed(&self, params: &ParamStore, states: &[StateRow], pairs: &[(usize, usize)]) -> Vec<f32> {
        let phis = self.encode_all(states);
        self.net.eval_pairs(params, &phis, pairs)
    }

    pub fn predict_distance(&self, s: &StateRow, g: &StateRow) -> f64 {
        self.predict_many(&[(*s, *g)])[0]
    }

    pub fn predict_many(&self, pairs: &[(StateRow, StateRow)]) -> Vec<f64> {
        let mut states = Vec::with_capacity(2 * pairs.len());
        for (s, g) in pairs {
            states.push(*s);
            states.push(self.canonical_goal(g));
        }
        let idx: Vec<_> = (0..pairs.len()).map(|i| (2 * i, 2 * i + 1)).collect();
        self.eval_indexed(&self.params, &states, &idx)
            .into_iter()
            .map(|v| v as f64)
            .collect()
    }

    pub fn predict_horizon(&self, hc: &HorizonCfg, s: &StateRow, g: &StateRow) -> usize {
        horizon_from_distance(self.predict_distance(s, g), hc)
    }

    pub fn to_checkpoint(&self, ema: Option<&EmaStore>) -> Result<Checkpoint> {
        let config = serde_json::to_string(&self.arch)
            .map_err(|e| Error::Config(format!("serializing predictor config: {e}")))?;
        let mut ck = Checkpoint::new(config);
        ck.push("rff/B", &[STATE_DIM, self.rff.features()], self.rff.matrix().to_vec());
        ck.push_store("net", &self.params);
        if let Some(ema) = ema {
            ck.push_store("ema", ema.params());
        }
        Ok(ck)
    }

    /// Restores a model; when `use_ema` is set and the checkpoint holds an EMA
    /// shadow, the shadow becomes the model's weights.
    pub fn from_checkpoint(ck: &Checkpoint, use_ema: bool) -> Result<Self> {
        let arch: LpArch = serde_json::from_str(&ck.config)
            .map_err(|e| Error::Config(format!("predictor config echo: {e}")))?;
        let mut model = LpModel::new(arch);
        let b = ck.get("rff/B")?;
        model.rff = RffEncoder::from_matrix(b.data.clone(), model.arch.rff_features)?;
        let prefix = if use_ema && ck.get(&format!("ema/{}", model.params.name(model.net.head.w))).is_ok() {
            "ema"
        } else {
            "net"
        };
        ck.load_store(prefix, &mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path, ema: Option<&EmaStore>) -> Result<()> {
        self.to_checkpoint(ema)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        LpModel::from_checkpoint(&Checkpoint::load(path)?, true)
    }
}

pub fn canonical_goal(g: &StateRow, mask: &[bool; STATE_DIM]) -> StateRow {
    std::array::from_fn(|i| if mask[i] { g[i] } else { REST_VELOCITY })
}

fn masked_gap(a: &StateRow, b: &StateRow, mask: &[bool; STATE_DIM]) -> f32 {
    (0..STATE_DIM)
        .filter(|&i| mask[i])
        .map(|i| (a[i] - b[i]).abs())
        .fold(0.0, f32::max)
}

/// One training tuple.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub s: StateRow,
    /// Goal after canonicalization.
    pub g: StateRow,
    pub hit: bool,
    pub k: usize,
    pub s_k: StateRow,
    /// Relay state when this sample contributes a triangle term.
    pub relay: Option<StateRow>,
    pub episode: usize,
    pub t: usize,
}

/// Which mixture component produced a goal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoalSource {
    Endpoint,
    LocalFuture,
    Global,
}

/// Dataset view with the lookups pair sampling needs.
pub struct PairSource<'a> {
    data: &'a NormalizedDataset,
    eligible: Vec<usize>,
    /// Cumulative state counts for uniform global draws.
    offsets: Vec<usize>,
}

impl<'a> PairSource<'a> {
    pub fn new(data: &'a NormalizedDataset) -> Result<Self> {
        let eligible: Vec<usize> = (0..data.len()).filter(|&i| data.episodes[i].len() >= 2).collect();
        if eligible.is_empty() {
            return Err(Error::Config("no episode with at least two states".into()));
        }
        let mut offsets = Vec::with_capacity(data.len() + 1);
        offsets.push(0);
        for e in &data.episodes {
            offsets.push(offsets.last().unwrap() + e.len());
        }
        Ok(PairSource {
            data,
            eligible,
            offsets,
        })
    }

    pub fn random_state<R: Rng>(&self, rng: &mut R) -> StateRow {
        let flat = rng.random_range(0..*self.offsets.last().unwrap());
        let ep = self.offsets.partition_point(|&o| o <= flat) - 1;
        self.data.episodes[ep][flat - self.offsets[ep]]
    }

    /// Builds the sample for anchor state `(episode, t)` and a given goal.
    pub fn pair_for_goal<R: Rng>(
        &self,
        episode: usize,
        t: usize,
        goal: &StateRow,
        k_set: &[usize],
        arch: &LpArch,
        rng: &mut R,
    ) -> PairSample {
        let ep = &self.data.episodes[episode];
        let g = canonical_goal(goal, &arch.goal_mask);
        let eps = arch.eps as f32;
        let last = (t + arch.t_max).min(ep.len() - 1);
        let hit = (t..=last).find(|&u| masked_gap(&ep[u], &g, &arch.goal_mask) <= eps);
        let (hit, k, s_k) = match hit {
            Some(u) => (true, u - t, ep[u]),
            None => {
                let k = k_set[rng.random_range(0..k_set.len())];
                (false, k, ep[(t + k).min(ep.len() - 1)])
            }
        };
        PairSample {
            s: ep[t],
            g,
            hit,
            k,
            s_k,
            relay: None,
            episode,
            t,
        }
    }
}

/// Draws a batch of tuples for one phase. Relays default to the on-trajectory
/// successor `s_k`; [`mine_relay`] may replace them.
pub fn sample_pair_batch<R: Rng>(
    src: &PairSource,
    phase: &PhaseCfg,
    arch: &LpArch,
    batch: usize,
    rng: &mut R,
) -> Vec<PairSample> {
    let mix = WeightedIndex::new(phase.mixture).expect("validated mixture");
    (0..batch)
        .map(|_| {
            let episode = src.eligible[rng.random_range(0..src.eligible.len())];
            let ep = &src.data.episodes[episode];
            let t = rng.random_range(0..ep.len() - 1);
            let goal = match mix.sample(rng) {
                0 => ep[ep.len() - 1],
                1 => {
                    let hi = (t + arch.t_max).min(ep.len() - 1);
                    ep[rng.random_range(t + 1..=hi)]
                }
                _ => src.random_state(rng),
            };
            let mut p = src.pair_for_goal(episode, t, &goal, &phase.k_set, arch, rng);
            if phase.relay_prob > 0.0 && rng.random_bool(phase.relay_prob) {
                p.relay = Some(p.s_k);
            }
            p
        })
        .collect()
}

/// Relay selection strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelayMode {
    OnTrajectory,
    SemiHard,
}

/// Replaces the relay of every relay-carrying sample. Semi-hard mode scores
/// `m` pooled candidates by `f̄(s,h) + f̄(h,g)` under `ema` and keeps the
/// smallest; an empty pool keeps `s_k`.
pub fn mine_relay<R: Rng>(
    samples: &mut [PairSample],
    pool: &[StateRow],
    model: &LpModel,
    ema: &ParamStore,
    mode: RelayMode,
    m: usize,
    rng: &mut R,
) {
    let active: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].relay.is_some()).collect();
    if mode == RelayMode::OnTrajectory || pool.is_empty() || m == 0 {
        for &i in &active {
            samples[i].relay = Some(samples[i].s_k);
        }
        return;
    }
    let m = m.min(pool.len());
    // State table: pool as first argument, pool as goal, then per-sample s and g.
    let np = pool.len();
    let mut states: Vec<StateRow> = pool.to_vec();
    states.extend(pool.iter().map(|h| model.canonical_goal(h)));
    let base = states.len();
    for &i in &active {
        states.push(samples[i].s);
        states.push(samples[i].g);
    }
    let mut chosen = Vec::with_capacity(active.len());
    let mut pairs = Vec::with_capacity(active.len() * m * 2);
    for (a, _) in active.iter().enumerate() {
        let cands = index::sample(rng, np, m).into_vec();
        let (si, gi) = (base + 2 * a, base + 2 * a + 1);
        for &c in &cands {
            pairs.push((si, np + c));
            pairs.push((c, gi));
        }
        chosen.push(cands);
    }
    let vals = model.eval_indexed(ema, &states, &pairs);
    for (a, &i) in active.iter().enumerate() {
        let scores = &vals[a * 2 * m..(a + 1) * 2 * m];
        let best = (0..m)
            .min_by(|&x, &y| {
                let sx = scores[2 * x] + scores[2 * x + 1];
                let sy = scores[2 * y] + scores[2 * y + 1];
                sx.total_cmp(&sy)
            })
            .expect("m ≥ 1");
        samples[i].relay = Some(pool[chosen[a][best]]);
    }
}

/// Regression target: `min{1, k/T}` on a hit, `min{1, k/T + f̄(s_k,g)}` otherwise.
pub fn compute_target(hit: bool, k: usize, t_max: usize, ema_skg: f64) -> f64 {
    let step = k as f64 / t_max as f64;
    if hit {
        step.min(1.0)
    } else {
        (step + ema_skg).min(1.0)
    }
}

/// Constant part of a training batch: features and EMA-derived bounds.
#[derive(Clone, Debug)]
pub struct LpBatch {
    /// `2n` feature rows: the `n` pairs `(s,g)`, then the `n` pairs `(g,g)`.
    pub z: Vec<f32>,
    pub n: usize,
    pub target: Vec<f64>,
    pub cons_bound: Vec<f64>,
    pub tri_bound: Vec<Option<f64>>,
    pub weights: LossWeights,
}

/// Evaluates EMA bounds and assembles the constant batch.
pub fn build_batch(model: &LpModel, ema: &ParamStore, samples: &[PairSample], weights: LossWeights) -> LpBatch {
    let n = samples.len();
    let t_max = model.arch.t_max;
    // State table per sample: s, g, s_k, relay(first arg), relay(goal).
    let mut states = Vec::with_capacity(5 * n);
    for p in samples {
        let h = p.relay.unwrap_or(p.s_k);
        states.extend([p.s, p.g, p.s_k, h, model.canonical_goal(&h)]);
    }
    let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (5 * i + 2, 5 * i + 1)).collect();
    let relays: Vec<usize> = (0..n).filter(|&i| samples[i].relay.is_some()).collect();
    for &i in &relays {
        pairs.push((5 * i, 5 * i + 4));
        pairs.push((5 * i + 3, 5 * i + 1));
    }
    let vals = model.eval_indexed(ema, &states, &pairs);
    let mut target = Vec::with_capacity(n);
    let mut cons_bound = Vec::with_capacity(n);
    for (i, p) in samples.iter().enumerate() {
        let skg = vals[i] as f64;
        target.push(compute_target(p.hit, p.k, t_max, skg));
        cons_bound.push((p.k as f64 / t_max as f64 + skg).min(1.0));
    }
    let mut tri_bound = vec![None; n];
    for (j, &i) in relays.iter().enumerate() {
        let b = vals[n + 2 * j] as f64 + vals[n + 2 * j + 1] as f64;
        tri_bound[i] = Some(b.min(1.0));
    }
    let phis = model.encode_all(&states);
    let p = model.rff.dim();
    let mut idx: Vec<(usize, usize)> = (0..n).map(|i| (5 * i, 5 * i + 1)).collect();
    idx.extend((0..n).map(|i| (5 * i + 1, 5 * i + 1)));
    LpBatch {
        z: pair_features(&phis, p, &idx),
        n,
        target,
        cons_bound,
        tri_bound,
        weights,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LpLosses {
    pub td: f64,
    pub cons: f64,
    pub tri: f64,
    pub bdry: f64,
    pub clip: f64,
    pub total: f64,
}

fn huber(x: f64, kappa: f64) -> (f64, f64) {
    if x.abs() <= kappa {
        (0.5 * x * x, x)
    } else {
        (kappa * (x.abs() - 0.5 * kappa), kappa * x.signum())
    }
}

/// Loss components from predictions `f(s,g)` and `f(g,g)`, with the
/// derivative of the total with respect to each prediction.
pub fn losses_from_outputs(f_sg: &[f64], f_gg: &[f64], batch: &LpBatch) -> (LpLosses, Vec<f64>, Vec<f64>) {
    let n = f_sg.len();
    let w = &batch.weights;
    let inv = 1.0 / n as f64;
    let n_tri = batch.tri_bound.iter().filter(|b| b.is_some()).count();
    let inv_tri = if n_tri > 0 { 1.0 / n_tri as f64 } else { 0.0 };
    let mut l = LpLosses::default();
    let mut d_sg = vec![0.0; n];
    let mut d_gg = vec![0.0; n];
    for i in 0..n {
        let f = f_sg[i];
        let (h, dh) = huber(f - batch.target[i], w.kappa);
        l.td += h * inv;
        d_sg[i] += dh * inv;

        let over = (f - batch.cons_bound[i]).max(0.0);
        l.cons += over * over * inv;
        d_sg[i] += w.cons * 2.0 * over * inv;

        if let Some(b) = batch.tri_bound[i] {
            let over = (f - b).max(0.0);
            l.tri += over * over * inv_tri;
            d_sg[i] += w.tri * 2.0 * over * inv_tri;
        }

        let over = (f - 1.0).max(0.0);
        l.clip += over * over * inv;
        d_sg[i] += w.clip * 2.0 * over * inv;

        l.bdry += f_gg[i] * f_gg[i] * inv;
        d_gg[i] = w.bdry * 2.0 * f_gg[i] * inv;
    }
    l.total = l.td + w.cons * l.cons + w.tri * l.tri + w.bdry * l.bdry + w.clip * l.clip;
    (l, d_sg, d_gg)
}

/// Composite predictor loss as an [`Objective`] over a constant batch.
pub struct LpObjective<'a> {
    pub net: &'a LpNet,
}

impl LpObjective<'_> {
    fn outputs<T: Real>(&self, params: &ParamStore<T>, batch: &LpBatch) -> (Vec<T>, NetCache<T>, Vec<T>) {
        let z: Vec<T> = batch.z.iter().map(|v| T::of(*v as f64)).collect();
        let (a, cache) = self.net.forward(params, &z, 2 * batch.n);
        (a, cache, z)
    }

    pub fn components<T: Real>(&self, params: &ParamStore<T>, batch: &LpBatch) -> Result<LpLosses> {
        let (a, _, _) = self.outputs(params, batch);
        let f: Vec<f64> = a.iter().map(|v| softplus(v.f64())).collect();
        let (l, _, _) = losses_from_outputs(&f[..batch.n], &f[batch.n..], batch);
        check_components(&l)?;
        Ok(l)
    }
}

fn check_components(l: &LpLosses) -> Result<()> {
    finite("L_TD", l.td)?;
    finite("L_cons", l.cons)?;
    finite("L_tri", l.tri)?;
    finite("L_bdry", l.bdry)?;
    finite("L_clip", l.clip)?;
    finite("L_total", l.total)?;
    Ok(())
}

impl Objective for LpObjective<'_> {
    type Batch = LpBatch;

    fn loss<T: Real>(&self, params: &ParamStore<T>, batch: &LpBatch) -> Result<f64> {
        Ok(self.components(params, batch)?.total)
    }

    fn loss_and_grad<T: Real>(&self, params: &mut ParamStore<T>, batch: &LpBatch) -> Result<f64> {
        let (a, cache, _) = self.outputs(params, batch);
        let f: Vec<f64> = a.iter().map(|v| softplus(v.f64())).collect();
        let (l, d_sg, d_gg) = losses_from_outputs(&f[..batch.n], &f[batch.n..], batch);
        check_components(&l)?;
        let da: Vec<T> = d_sg
            .iter()
            .chain(&d_gg)
            .zip(&a)
            .map(|(d, a)| T::of(d * sigmoid(a.f64())))
            .collect();
        self.net.backward(params, &cache, 2 * batch.n, &da);
        Ok(l.total)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LpTrainCfg {
    pub arch: LpArch,
    pub curriculum: CurriculumCfg,
    pub weights: LossWeights,
    pub adam: AdamCfg,
    pub ema_rho: f64,
    /// Training seed (batch sampling and mining).
    pub seed: u64,
    pub log_every: usize,
    pub divergence_loss: f64,
    pub divergence_window: usize,
}

impl Default for LpTrainCfg {
    fn default() -> Self {
        LpTrainCfg {
            arch: LpArch::default(),
            curriculum: CurriculumCfg::default(),
            weights: LossWeights::default(),
            adam: AdamCfg::with_lr(1e-3),
            ema_rho: 0.995,
            seed: 0,
            log_every: 500,
            divergence_loss: 1e3,
            divergence_window: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LpLogRow {
    pub step: usize,
    pub phase: usize,
    pub lambda_cons: f64,
    pub lambda_tri: f64,
    #[serde(flatten)]
    pub losses: LpLosses,
}

pub struct LpTrained {
    pub model: LpModel,
    pub ema: EmaStore,
    pub log: Vec<LpLogRow>,
    pub rejected_steps: usize,
}

impl LpTrained {
    /// Model whose weights are the EMA shadow.
    pub fn ema_model(&self) -> LpModel {
        let mut m = self.model.clone();
        m.params = self.ema.params().clone();
        m
    }
}

/// λ multipliers at `step` steps into phase `phase`, ramping linearly from the
/// previous phase's level.
pub fn lambda_scale(cfg: &CurriculumCfg, phase: usize, step: usize) -> [f64; 2] {
    let to = cfg.phases[phase].lambda_scale;
    let from = if phase == 0 {
        to
    } else {
        cfg.phases[phase - 1].lambda_scale
    };
    let a = if cfg.ramp_steps == 0 {
        1.0
    } else {
        (step as f64 / cfg.ramp_steps as f64).min(1.0)
    };
    [from[0] + a * (to[0] - from[0]), from[1] + a * (to[1] - from[1])]
}

/// Runs the phased curriculum. `on_log` sees every logged row.
pub fn train_length_predictor(
    data: &NormalizedDataset,
    cfg: &LpTrainCfg,
    mut on_log: impl FnMut(&LpLogRow),
) -> Result<LpTrained> {
    cfg.curriculum.validate()?;
    let src = PairSource::new(data)?;
    let mut model = LpModel::new(cfg.arch.clone());
    let mut ema = EmaStore::new(&model.params, cfg.ema_rho);
    let mut opt = OptimState::new(&model.params, cfg.adam);
    let mut r = rng::seeded(rng::derive(cfg.seed, "lp-train"));
    let cur = &cfg.curriculum;
    let mut log = Vec::new();
    let mut acc = LpLosses::default();
    let mut acc_n = 0usize;
    let mut above = 0usize;
    let mut rejected = 0usize;
    let mut global = 0usize;
    for (pi, phase) in cur.phases.iter().enumerate() {
        for step in 0..phase.steps {
            let scale = lambda_scale(cur, pi, step);
            let weights = LossWeights {
                cons: cfg.weights.cons * scale[0],
                tri: cfg.weights.tri * scale[1],
                ..cfg.weights
            };
            let mut samples = sample_pair_batch(&src, phase, &cfg.arch, cur.batch, &mut r);
            if phase.semi_hard && samples.iter().any(|s| s.relay.is_some()) {
                let mut pool: Vec<StateRow> = samples.iter().flat_map(|s| [s.s_k, s.g]).collect();
                pool.extend((0..cur.batch).map(|_| src.random_state(&mut r)));
                mine_relay(
                    &mut samples,
                    &pool,
                    &model,
                    ema.params(),
                    RelayMode::SemiHard,
                    cur.mine_candidates,
                    &mut r,
                );
            }
            let batch = build_batch(&model, ema.params(), &samples, weights);
            let objective = LpObjective { net: &model.net };
            global += 1;
            let loss = match value_and_grad(&objective, &mut model.params, &batch) {
                Ok(l) => l,
                Err(Error::NonFinite(term)) => {
                    log::warn!("predictor step {global}: non-finite {term}, step rejected");
                    rejected += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if loss > cfg.divergence_loss {
                above += 1;
                if above >= cfg.divergence_window {
                    return Err(Error::Diverged {
                        step: global,
                        loss,
                        window: cfg.divergence_window,
                    });
                }
            } else {
                above = 0;
            }
            match adam_step(&mut model.params, &mut opt) {
                Ok(()) => {}
                Err(Error::NonFinite(term)) => {
                    log::warn!("predictor step {global}: non-finite {term}, step rejected");
                    rejected += 1;
                    continue;
                }
                Err(e) => return Err(e),
            }
            ema.update(&model.params)?;
            if cfg.log_every > 0 {
                let l = LpObjective { net: &model.net }.components(&model.params, &batch).unwrap_or_default();
                acc.td += l.td;
                acc.cons += l.cons;
                acc.tri += l.tri;
                acc.bdry += l.bdry;
                acc.clip += l.clip;
                acc.total += l.total;
                acc_n += 1;
                if global.is_multiple_of(cfg.log_every) {
                    let k = acc_n.max(1) as f64;
                    let row = LpLogRow {
                        step: global,
                        phase: pi + 1,
                        lambda_cons: weights.cons,
                        lambda_tri: weights.tri,
                        losses: LpLosses {
                            td: acc.td / k,
                            cons: acc.cons / k,
                            tri: acc.tri / k,
                            bdry: acc.bdry / k,
                            clip: acc.clip / k,
                            total: acc.total / k,
                        },
                    };
                    on_log(&row);
                    log.push(row);
                    acc = LpLosses::default();
                    acc_n = 0;
                }
            }
        }
    }
    Ok(LpTrained {
        model,
        ema,
        log,
        rejected_steps: rejected,
    })
}
