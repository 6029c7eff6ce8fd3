use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamCfg {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamCfg {
    fn default() -> Self {
        AdamCfg {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(1.0),
        }
    }
}

impl AdamCfg {
    pub fn with_lr(lr: f64) -> Self {
        AdamCfg {
            lr,
            ..AdamCfg::default()
        }
    }
}

/// Adam moment buffers and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub cfg: AdamCfg,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl OptimState {
    pub fn new(params: &ParamStore, cfg: AdamCfg) -> Self {
        let zeros = || {
            params
                .ids()
                .map(|id| vec![0.0f32; params.value(id).len()])
                .collect::<Vec<_>>()
        };
        OptimState {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update from the gradient buffers of `params`.
///
/// Non-finite gradients are rejected before anything is modified.
pub fn adam_step(params: &mut ParamStore, opt: &mut OptimState) -> Result<()> {
    if opt.m.len() != params.len()
        || params
            .ids()
            .zip(&opt.m)
            .any(|(id, m)| m.len() != params.value(id).len())
    {
        return Err(Error::Shape("optimizer state does not match parameters".into()));
    }
    if !params.grads_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let scale = match opt.cfg.clip {
        Some(c) => {
            let norm = params.grad_norm();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    opt.step += 1;
    let t = opt.step as i32;
    let AdamCfg {
        lr,
        beta1,
        beta2,
        eps,
        ..
    } = opt.cfg;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let step_size = (lr / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    let (b1, b2, eps, scale) = (beta1 as f32, beta2 as f32, eps as f32, scale as f32);
    let ids: Vec<_> = params.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let (m, v) = (&mut opt.m[i], &mut opt.v[i]);
        let g: Vec<f32> = params.grad(id).iter().map(|g| g * scale).collect();
        let w = params.value_mut(id);
        for j in 0..w.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            w[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
        }
    }
    if !params.values_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(())
}

/// Exponential moving average of a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaStore {
    shadow: ParamStore,
    pub rho: f64,
}

impl EmaStore {
    pub fn new(params: &ParamStore, rho: f64) -> Self {
        let mut shadow = params.clone();
        shadow.zero_grad();
        EmaStore { shadow, rho }
    }

    pub fn from_shadow(shadow: ParamStore, rho: f64) -> Self {
        EmaStore { shadow, rho }
    }

    pub fn params(&self) -> &ParamStore {
        &self.shadow
    }

    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        ema_update(self, params, self.rho)
    }
}

/// `shadow ← ρ·shadow + (1−ρ)·params`, element-wise.
pub fn ema_update(ema: &mut EmaStore, params: &ParamStore, rho: f64) -> Result<()> {
    if !ema.shadow.same_layout(params) {
        return Err(Error::Shape("EMA shadow does not match parameters".into()));
    }
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let src = params.value(id);
        for (s, p) in ema.shadow.value_mut(id).iter_mut().zip(src) {
            *s = (rho * *s as f64 + (1.0 - rho) * *p as f64) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamId;

    fn store(values: Vec<f32>) -> ParamStore {
        let mut ps = ParamStore::new();
        let n = values.len();
        ps.add("w", &[n], values);
        ps
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut ps = store(vec![1.0, -2.0]);
        let mut opt = OptimState::new(&ps, AdamCfg::default());
        adam_step(&mut ps, &mut opt).unwrap();
        assert_eq!(ps.value(ParamId(0)), &[1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut ps = store(vec![0.0, 0.0, 0.0]);
        ps.grad_mut(ParamId(0)).copy_from_slice(&[0.3, -0.01, 0.2]);
        let mut opt = OptimState::new(
            &ps,
            AdamCfg {
                lr: 0.01,
                clip: None,
                ..AdamCfg::default()
            },
        );
        adam_step(&mut ps, &mut opt).unwrap();
        let w = ps.value(ParamId(0));
        for (x, s) in w.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * 0.01).abs() < 1e-5, "{x}");
        }
    }

    #[test]
    fn non_finite_gradient_rejected_without_side_effects() {
        let mut ps = store(vec![1.0]);
        ps.grad_mut(ParamId(0))[0] = f32::NAN;
        let mut opt = OptimState::new(&ps, AdamCfg::default());
        let before = opt.clone();
        assert!(adam_step(&mut ps, &mut opt).is_err());
        assert_eq!(opt, before);
        assert_eq!(ps.value(ParamId(0)), &[1.0]);
    }

    #[test]
    fn clip_bounds_the_effective_gradient() {
        let mut a = store(vec![0.0, 0.0]);
        let mut b = store(vec![0.0, 0.0]);
        a.grad_mut(ParamId(0)).copy_from_slice(&[30.0, 40.0]);
        b.grad_mut(ParamId(0)).copy_from_slice(&[0.6, 0.8]);
        let cfg = AdamCfg {
            lr: 0.1,
            ..AdamCfg::default()
        };
        let (mut oa, mut ob) = (OptimState::new(&a, cfg), OptimState::new(&b, cfg));
        for _ in 0..3 {
            adam_step(&mut a, &mut oa).unwrap();
            adam_step(&mut b, &mut ob).unwrap();
        }
        for (x, y) in a.value(ParamId(0)).iter().zip(b.value(ParamId(0))) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let target = [1.5f32, -0.5, 2.0];
        let mut ps = store(vec![0.0; 3]);
        let mut opt = OptimState::new(&ps, AdamCfg::with_lr(0.05));
        let mut dists = Vec::new();
        for _ in 0..100 {
            let w = ps.value(ParamId(0)).to_vec();
            let g: Vec<f32> = w.iter().zip(&target).map(|(w, t)| 2.0 * (w - t)).collect();
            ps.grad_mut(ParamId(0)).copy_from_slice(&g);
            adam_step(&mut ps, &mut opt).unwrap();
            let d: f32 = ps
                .value(ParamId(0))
                .iter()
                .zip(&target)
                .map(|(w, t)| (w - t).powi(2))
                .sum::<f32>()
                .sqrt();
            dists.push(d);
        }
        // The oracle: distance shrinks monotonically once momentum has built up.
        for w in dists[10..40].windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{:?}", w);
        }
        assert!(dists[99] < 0.1 * dists[0]);
    }

    #[test]
    fn ema_limits() {
        let ps = store(vec![2.0, 4.0]);
        let mut ema = EmaStore::new(&store(vec![0.0, 0.0]), 0.5);
        ema_update(&mut ema, &ps, 1.0).unwrap();
        assert_eq!(ema.params().value(ParamId(0)), &[0.0, 0.0]);
        ema_update(&mut ema, &ps, 0.0).unwrap();
        assert_eq!(ema.params().value(ParamId(0)), &[2.0, 4.0]);

        let mut ema = EmaStore::new(&store(vec![0.0, 0.0]), 0.9);
        let mut prev = f32::INFINITY;
        for _ in 0..50 {
            ema.update(&ps).unwrap();
            let gap = (ema.params().value(ParamId(0))[0] - 2.0).abs();
            assert!(gap < prev);
            prev = gap;
        }
        // Geometric contraction: 0.9^50 * 2.
        assert!((prev - 2.0 * 0.9f32.powi(50)).abs() < 1e-4);
    }

    #[test]
    fn ema_layout_mismatch_errors() {
        let mut ema = EmaStore::new(&store(vec![0.0]), 0.9);
        assert!(ema.update(&store(vec![0.0, 1.0])).is_err());
    }
}
