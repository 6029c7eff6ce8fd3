//! Layers with explicit forward caches and backward passes.
//!
//! Dense layers take row-major `n × features` batches. Temporal layers take one
//! sample at a time in channel-major `channels × len` layout.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{gemm, ParamId, ParamStore, Real};

const NORM_EPS: f64 = 1e-5;

fn uniform<R: Rng>(rng: &mut R, n: usize, bound: f64) -> Vec<f32> {
    let dist = Uniform::new_inclusive(-bound as f32, bound as f32).expect("valid bound");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Fully connected layer `y = x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = ps.add(
            &format!("{name}.w"),
            &[fan_out, fan_in],
            uniform(rng, fan_in * fan_out, bound),
        );
        let b = ps.add(&format!("{name}.b"), &[fan_out], uniform(rng, fan_out, bound));
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], n: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), n * self.fan_in);
        let bias = ps.value(self.b);
        let mut y = Vec::with_capacity(n * self.fan_out);
        for _ in 0..n {
            y.extend_from_slice(bias);
        }
        gemm(n, self.fan_in, self.fan_out, x, false, ps.value(self.w), true, &mut y, true);
        y
    }

    /// Accumulates parameter gradients; returns `dx` when `need_dx`.
    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        x: &[T],
        n: usize,
        dy: &[T],
        need_dx: bool,
    ) -> Option<Vec<T>> {
        let (i, o) = (self.fan_in, self.fan_out);
        gemm(o, n, i, dy, true, x, false, ps.grad_mut(self.w), true);
        let gb = ps.grad_mut(self.b);
        for row in dy.chunks_exact(o) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += *d;
            }
        }
        need_dx.then(|| {
            let mut dx = vec![T::zero(); n * i];
            gemm(n, o, i, dy, false, ps.value(self.w), false, &mut dx, false);
            dx
        })
    }
}

/// Per-row normalization with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

pub struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = ps.add(&format!("{name}.g"), &[dim], vec![1.0; dim]);
        let bias = ps.add(&format!("{name}.b"), &[dim], vec![0.0; dim]);
        LayerNorm { gain, bias, dim }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], n: usize) -> (Vec<T>, NormCache<T>) {
        let d = self.dim;
        let (g, b) = (ps.value(self.gain), ps.value(self.bias));
        let mut y = vec![T::zero(); n * d];
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let (mean, rs) = moments(row);
            rstd.push(rs);
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * g[j] + b[j];
            }
        }
        (y, NormCache { xhat, rstd })
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        cache: &NormCache<T>,
        n: usize,
        dy: &[T],
    ) -> Vec<T> {
        let d = self.dim;
        {
            let gg = ps.grad_mut(self.gain);
            for r in 0..n {
                for j in 0..d {
                    gg[j] += dy[r * d + j] * cache.xhat[r * d + j];
                }
            }
            let gb = ps.grad_mut(self.bias);
            for r in 0..n {
                for j in 0..d {
                    gb[j] += dy[r * d + j];
                }
            }
        }
        let g = ps.value(self.gain);
        let mut dx = vec![T::zero(); n * d];
        let mut dxhat = vec![T::zero(); d];
        for r in 0..n {
            for j in 0..d {
                dxhat[j] = dy[r * d + j] * g[j];
            }
            normalize_backward(
                &dxhat,
                &cache.xhat[r * d..(r + 1) * d],
                cache.rstd[r],
                &mut dx[r * d..(r + 1) * d],
            );
        }
        dx
    }
}

/// Mean and reciprocal standard deviation, accumulated in `f64`.
fn moments<T: Real>(xs: &[T]) -> (T, T) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|x| x.f64()).sum::<f64>() / n;
    let var = xs.iter().map(|x| (x.f64() - mean).powi(2)).sum::<f64>() / n;
    (T::of(mean), T::of(1.0 / (var + NORM_EPS).sqrt()))
}

/// `dx = rstd·(dxhat − mean(dxhat) − xhat·mean(dxhat·xhat))`.
fn normalize_backward<T: Real>(dxhat: &[T], xhat: &[T], rstd: T, dx: &mut [T]) {
    let n = dxhat.len() as f64;
    let m1 = dxhat.iter().map(|v| v.f64()).sum::<f64>() / n;
    let m2 = dxhat
        .iter()
        .zip(xhat)
        .map(|(a, b)| a.f64() * b.f64())
        .sum::<f64>()
        / n;
    let (m1, m2) = (T::of(m1), T::of(m2));
    for ((o, dh), h) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o = rstd * (*dh - m1 - *h * m2);
    }
}

/// Group normalization over `channels × len` with per-channel affine.
#[derive(Clone, Copy, Debug)]
pub struct GroupNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels.is_multiple_of(groups), "groups must divide channels");
        let gain = ps.add(&format!("{name}.g"), &[channels], vec![1.0; channels]);
        let bias = ps.add(&format!("{name}.b"), &[channels], vec![0.0; channels]);
        GroupNorm {
            gain,
            bias,
            channels,
            groups,
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], len: usize) -> (Vec<T>, NormCache<T>) {
        let span = self.channels / self.groups * len;
        let (g, b) = (ps.value(self.gain), ps.value(self.bias));
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = Vec::with_capacity(self.groups);
        for (gi, chunk) in x.chunks_exact(span).enumerate() {
            let (mean, rs) = moments(chunk);
            rstd.push(rs);
            for (o, v) in xhat[gi * span..(gi + 1) * span].iter_mut().zip(chunk) {
                *o = (*v - mean) * rs;
            }
        }
        let mut y = xhat.clone();
        for (c, row) in y.chunks_exact_mut(len).enumerate() {
            for v in row {
                *v = *v * g[c] + b[c];
            }
        }
        (y, NormCache { xhat, rstd })
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        cache: &NormCache<T>,
        len: usize,
        dy: &[T],
    ) -> Vec<T> {
        {
            let gg = ps.grad_mut(self.gain);
            for (c, (drow, hrow)) in dy.chunks_exact(len).zip(cache.xhat.chunks_exact(len)).enumerate() {
                gg[c] += drow.iter().zip(hrow).map(|(d, h)| *d * *h).sum();
            }
            let gb = ps.grad_mut(self.bias);
            for (c, drow) in dy.chunks_exact(len).enumerate() {
                gb[c] += drow.iter().copied().sum();
            }
        }
        let g = ps.value(self.gain);
        let mut dxhat = dy.to_vec();
        for (c, row) in dxhat.chunks_exact_mut(len).enumerate() {
            for v in row {
                *v *= g[c];
            }
        }
        let span = self.channels / self.groups * len;
        let mut dx = vec![T::zero(); dy.len()];
        for gi in 0..self.groups {
            let r = gi * span..(gi + 1) * span;
            normalize_backward(&dxhat[r.clone()], &cache.xhat[r.clone()], cache.rstd[gi], &mut dx[r]);
        }
        dx
    }
}

/// Temporal convolution with odd kernel, dilation and zero "same" padding.
/// Weights are stored `out × (in·k)`.
#[derive(Clone, Copy, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1 && dilation >= 1, "odd kernel, dilation ≥ 1");
        let fan_in = cin * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = ps.add(
            &format!("{name}.w"),
            &[cout, cin, kernel],
            uniform(rng, cout * fan_in, bound),
        );
        let b = ps.add(&format!("{name}.b"), &[cout], uniform(rng, cout, bound));
        Conv1d {
            w,
            b,
            cin,
            cout,
            kernel,
            dilation,
        }
    }

    fn im2col<T: Real>(&self, x: &[T], len: usize) -> Vec<T> {
        let half = (self.kernel / 2 * self.dilation) as isize;
        let mut cols = vec![T::zero(); self.cin * self.kernel * len];
        for c in 0..self.cin {
            let xrow = &x[c * len..(c + 1) * len];
            for j in 0..self.kernel {
                let shift = (j * self.dilation) as isize - half;
                let row = &mut cols[(c * self.kernel + j) * len..(c * self.kernel + j + 1) * len];
                for (t, o) in row.iter_mut().enumerate() {
                    let s = t as isize + shift;
                    if s >= 0 && (s as usize) < len {
                        *o = xrow[s as usize];
                    }
                }
            }
        }
        cols
    }

    /// Returns the output and the column buffer needed by `backward`.
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &[T], len: usize) -> (Vec<T>, Vec<T>) {
        debug_assert_eq!(x.len(), self.cin * len);
        let cols = self.im2col(x, len);
        let bias = ps.value(self.b);
        let mut y = Vec::with_capacity(self.cout * len);
        for &b in bias {
            y.extend(std::iter::repeat_n(b, len));
        }
        let k = self.cin * self.kernel;
        gemm(self.cout, k, len, ps.value(self.w), false, &cols, false, &mut y, true);
        (y, cols)
    }

    pub fn backward<T: Real>(
        &self,
        ps: &mut ParamStore<T>,
        cols: &[T],
        len: usize,
        dy: &[T],
        need_dx: bool,
    ) -> Option<Vec<T>> {
        let k = self.cin * self.kernel;
        gemm(self.cout, len, k, dy, false, cols, true, ps.grad_mut(self.w), true);
        let gb = ps.grad_mut(self.b);
        for (g, row) in gb.iter_mut().zip(dy.chunks_exact(len)) {
            *g += row.iter().copied().sum();
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); k * len];
        gemm(k, self.cout, len, ps.value(self.w), true, dy, false, &mut dcols, false);
        let half = (self.kernel / 2 * self.dilation) as isize;
        let mut dx = vec![T::zero(); self.cin * len];
        for c in 0..self.cin {
            for j in 0..self.kernel {
                let shift = (j * self.dilation) as isize - half;
                let row = &dcols[(c * self.kernel + j) * len..(c * self.kernel + j + 1) * len];
                let dxrow = &mut dx[c * len..(c + 1) * len];
                for (t, v) in row.iter().enumerate() {
                    let s = t as isize + shift;
                    if s >= 0 && (s as usize) < len {
                        dxrow[s as usize] += *v;
                    }
                }
            }
        }
        Some(dx)
    }
}

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|v| v.max(T::zero())).collect()
}

pub fn relu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(x, d)| if *x > T::zero() { *d } else { T::zero() })
        .collect()
}

/// `ln(1 + eˣ)`, evaluated without overflow.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|v| *v * sigmoid(*v)).collect()
}

pub fn silu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(x, d)| {
            let s = sigmoid(*x);
            *d * s * (T::one() + *x * (T::one() - s))
        })
        .collect()
}

/// Sinusoidal embedding `[sin(t·ωᵢ), cos(t·ωᵢ)]` with log-spaced frequencies.
pub fn sinusoidal(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = (-(10000f64.ln()) * i as f64 / denom).exp();
        out[i] = (t * w).sin();
        out[half + i] = (t * w).cos();
    }
    out
}

/// Index into `0..len` of position `i` under reflection padding.
pub fn reflect_index(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Right-pads every row of a `rows × len` array by reflection up to a
/// multiple of `multiple`. Returns the padded array and its length.
pub fn reflect_pad<T: Real>(x: &[T], rows: usize, len: usize, multiple: usize) -> (Vec<T>, usize) {
    let padded = len.div_ceil(multiple) * multiple;
    let mut out = Vec::with_capacity(rows * padded);
    for r in 0..rows {
        let row = &x[r * len..(r + 1) * len];
        out.extend((0..padded).map(|i| row[reflect_index(i, len)]));
    }
    (out, padded)
}

/// Adjoint of [`reflect_pad`]: folds padded gradients back onto the source.
pub fn reflect_pad_backward<T: Real>(dy: &[T], rows: usize, len: usize, padded: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * len];
    for r in 0..rows {
        for i in 0..padded {
            dx[r * len + reflect_index(i, len)] += dy[r * padded + i];
        }
    }
    dx
}

/// Keeps the first `len` columns of a `rows × padded` array.
pub fn crop<T: Real>(x: &[T], rows: usize, padded: usize, len: usize) -> Vec<T> {
    (0..rows)
        .flat_map(|r| x[r * padded..r * padded + len].iter().copied())
        .collect()
}

/// Adjoint of [`crop`].
pub fn crop_backward<T: Real>(dy: &[T], rows: usize, padded: usize, len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * padded];
    for r in 0..rows {
        dx[r * padded..r * padded + len].copy_from_slice(&dy[r * len..(r + 1) * len]);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use crate::nn::{grad_check, value_and_grad, Objective};
    use crate::rng;
    use rand_distr::StandardNormal;

    fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    /// Loss `Σ r ⊙ layer(x)` for a fixed random `r`, so every output matters.
    struct Probe<F> {
        x: Vec<f64>,
        r: Vec<f64>,
        run: F,
    }

    trait Run {
        fn fwd<T: Real>(&self, ps: &ParamStore<T>, x: &[T]) -> Vec<T>;
        fn bwd<T: Real>(&self, ps: &mut ParamStore<T>, x: &[T], dy: &[T]) -> Vec<T>;
    }

    impl<F: Run> Objective for Probe<F> {
        type Batch = ();
        fn loss<T: Real>(&self, ps: &ParamStore<T>, _: &()) -> Result<f64> {
            let x: Vec<T> = self.x.iter().map(|v| T::of(*v)).collect();
            let y = self.run.fwd(ps, &x);
            Ok(y.iter().zip(&self.r).map(|(y, r)| y.f64() * r).sum())
        }
        fn loss_and_grad<T: Real>(&self, ps: &mut ParamStore<T>, b: &()) -> Result<f64> {
            let x: Vec<T> = self.x.iter().map(|v| T::of(*v)).collect();
            let dy: Vec<T> = self.r.iter().map(|v| T::of(*v)).collect();
            self.run.bwd(ps, &x, &dy);
            self.loss(ps, b)
        }
    }

    /// Checks parameter gradients by finite differences and input gradients
    /// against a direct central difference on `x`.
    fn check<F: Run>(ps: &ParamStore, run: F, nx: usize, ny: usize, seed: u64) {
        let mut r = rng::seeded(seed);
        let probe = Probe {
            x: normals(&mut r, nx),
            r: normals(&mut r, ny),
            run,
        };
        let err = grad_check(&probe, ps, &(), 1e-6, 60, &mut r).unwrap();
        assert!(err < 1e-6, "param grad error {err}");

        let mut p64: ParamStore<f64> = ps.cast();
        value_and_grad(&probe, &mut p64, &()).unwrap();
        let dx = probe.run.bwd(&mut p64, &probe.x, &probe.r);
        for i in (0..nx).step_by((nx / 12).max(1)) {
            let mut xp = probe.x.clone();
            xp[i] += 1e-6;
            let up: f64 = probe.run.fwd(&p64, &xp).iter().zip(&probe.r).map(|(a, b)| a * b).sum();
            xp[i] -= 2e-6;
            let dn: f64 = probe.run.fwd(&p64, &xp).iter().zip(&probe.r).map(|(a, b)| a * b).sum();
            let num = (up - dn) / 2e-6;
            assert!((num - dx[i]).abs() < 1e-6 * num.abs().max(1.0), "dx[{i}] {num} vs {}", dx[i]);
        }
    }

    #[test]
    fn linear_gradients() {
        struct R(Linear, usize);
        impl Run for R {
            fn fwd<T: Real>(&self, ps: &ParamStore<T>, x: &[T]) -> Vec<T> {
                self.0.forward(ps, x, self.1)
            }
            fn bwd<T: Real>(&self, ps: &mut ParamStore<T>, x: &[T], dy: &[T]) -> Vec<T> {
                self.0.backward(ps, x, self.1, dy, true).unwrap()
            }
        }
        let mut ps = ParamStore::new();
        let l = Linear::new(&mut ps, "l", 5, 3, &mut rng::seeded(0));
        check(&ps, R(l, 4), 20, 12, 1);
    }

    #[test]
    fn layer_norm_gradients() {
        struct R(LayerNorm, usize);
        impl Run for R {
            fn fwd<T: Real>(&self, ps: &ParamStore<T>, x: &[T]) -> Vec<T> {
                self.0.forward(ps, x, self.1).0
            }
            fn bwd<T: Real>(&self, ps: &mut ParamStore<T>, x: &[T], dy: &[T]) -> Vec<T> {
                let (_, c) = self.0.forward(ps, x, self.1);
                self.0.backward(ps, &c, self.1, dy)
            }
        }
        let mut ps = ParamStore::new();
        let ln = LayerNorm::new(&mut ps, "ln", 6);
        let gid = ln.gain;
        ps.value_mut(gid).copy_from_slice(&[0.5, 1.5, -1.0, 2.0, 1.0, 0.3]);
        check(&ps, R(ln, 3), 18, 18, 2);
    }

    #[test]
    fn group_norm_gradients() {
        struct R(GroupNorm, usize);
        impl Run for R {
            fn fwd<T: Real>(&self, ps: &ParamStore<T>, x: &[T]) -> Vec<T> {
                self.0.forward(ps, x, self.1).0
            }
            fn bwd<T: Real>(&self, ps: &mut ParamStore<T>, x: &[T], dy: &[T]) -> Vec<T> {
                let (_, c) = self.0.forward(ps, x, self.1);
                self.0.backward(ps, &c, self.1, dy)
            }
        }
        let mut ps = ParamStore::new();
        let gn = GroupNorm::new(&mut ps, "gn", 4, 2);
        let gid = gn.gain;
        ps.value_mut(gid).copy_from_slice(&[0.5, 1.5, -1.0, 2.0]);
        check(&ps, R(gn, 7), 28, 28, 3);
    }

    #[test]
    fn conv_gradients_with_dilation() {
        struct R(Conv1d, usize);
        impl Run for R {
            fn fwd<T: Real>(&self, ps: &ParamStore<T>, x: &[T]) -> Vec<T> {
                self.0.forward(ps, x, self.1).0
            }
            fn bwd<T: Real>(&self, ps: &mut ParamStore<T>, x: &[T], dy: &[T]) -> Vec<T> {
                let (_, cols) = self.0.forward(ps, x, self.1);
                self.0.backward(ps, &cols, self.1, dy, true).unwrap()
            }
        }
        for (dil, seed) in [(1, 4), (2, 5), (3, 6)] {
            let mut ps = ParamStore::new();
            let conv = Conv1d::new(&mut ps, "c", 3, 2, 5, dil, &mut rng::seeded(seed));
            check(&ps, R(conv, 9), 27, 18, seed);
        }
    }

    #[test]
    fn conv_matches_naive_definition() {
        let mut ps = ParamStore::new();
        let conv = Conv1d::new(&mut ps, "c", 2, 3, 3, 2, &mut rng::seeded(9));
        let len = 6;
        let x: Vec<f32> = (0..2 * len).map(|i| (i as f32 * 0.37).sin()).collect();
        let (y, _) = conv.forward(&ps, &x, len);
        let w = ps.value(conv.w);
        let b = ps.value(conv.b);
        for o in 0..3 {
            for t in 0..len {
                let mut acc = b[o];
                for c in 0..2 {
                    for j in 0..3 {
                        let s = t as isize + 2 * j as isize - 2;
                        if (0..len as isize).contains(&s) {
                            acc += w[o * 6 + c * 3 + j] * x[c * len + s as usize];
                        }
                    }
                }
                assert!((acc - y[o * len + t]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn activations_and_their_derivatives() {
        let xs = [-30.0f64, -2.0, -0.1, 0.3, 4.0, 40.0];
        for &x in &xs {
            assert!(softplus(x) > 0.0);
            assert!((softplus(x) - (1.0 + x.exp()).ln()).abs() < 1e-9 * (1.0 + x.abs()));
            let h = 1e-6;
            let sd = (silu(&[x + h])[0] - silu(&[x - h])[0]) / (2.0 * h);
            assert!((silu_backward(&[x], &[1.0])[0] - sd).abs() < 1e-6);
        }
        assert_eq!(relu(&[-1.0, 2.0]), vec![0.0, 2.0]);
        assert_eq!(relu_backward(&[-1.0, 2.0], &[5.0, 5.0]), vec![0.0, 5.0]);
        assert_eq!(softplus(1000.0f32), 1000.0);
    }

    #[test]
    fn reflect_pad_and_adjoints() {
        let x: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0];
        let (p, n) = reflect_pad(&x, 2, 5, 4);
        assert_eq!(n, 8);
        assert_eq!(&p[..8], &[1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 3.0, 2.0]);
        assert_eq!(crop(&p, 2, 8, 5), x);
        // Adjoint identity ⟨pad(x), y⟩ = ⟨x, padᵀ(y)⟩.
        let y: Vec<f64> = (0..16).map(|i| (i as f64).cos()).collect();
        let lhs: f64 = p.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(reflect_pad_backward(&y, 2, 5, 8)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let z: Vec<f64> = (0..10).map(|i| i as f64 * 0.5).collect();
        let lhs: f64 = crop(&y, 2, 8, 5).iter().zip(&z).map(|(a, b)| a * b).sum();
        let rhs: f64 = y.iter().zip(crop_backward(&z, 2, 8, 5)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!(reflect_pad(&[7.0f64, 8.0], 1, 2, 4).0, vec![7.0, 8.0, 7.0, 8.0]);
    }

    #[test]
    fn sinusoidal_embedding_shape_and_range() {
        let e = sinusoidal(17.0, 8);
        assert_eq!(e.len(), 8);
        assert!((e[0] - 17f64.sin()).abs() < 1e-12);
        assert!((e[4] - 17f64.cos()).abs() < 1e-12);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
    }
}
