//! Small trainable-function toolkit: parameter stores, hand-written layer
//! backward passes, Adam, EMA shadows, finite-difference checks and a
//! checkpoint container.
//!
//! Every kernel is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for gradient verification.

mod checkpoint;
pub mod layers;
mod optim;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, NamedArray};
pub use optim::{adam_step, ema_update, AdamCfg, EmaStore, OptimState};

/// Floating-point scalar usable by the layer kernels.
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `C ← α·A·B + β·C` on strided matrices.
    ///
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`: every addressed element must
    /// lie inside its buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product `C (m×n) = op(A) · op(B)`, added to `C` when
/// `accumulate` is set. `op(A)` is `m×k`; with `ta` the buffer holds `k×m`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: A too small");
    assert!(b.len() >= k * n, "gemm: B too small");
    assert!(c.len() >= m * n, "gemm: C too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index addressed by these strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Handle to one array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter arrays with one gradient buffer each.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<T>>,
    grads: Vec<Vec<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Registers an array. Panics on a duplicate name or a length that does
    /// not match the shape, both of which are programming errors.
    pub fn add(&mut self, name: &str, shape: &[usize], values: Vec<T>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter {name}"
        );
        assert_eq!(shape.iter().product::<usize>(), values.len(), "{name}: shape");
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.grads.push(vec![T::zero(); values.len()]);
        self.values.push(values);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.grads[id.0]
    }

    /// Value and gradient of the same array, borrowed together.
    pub fn split(&mut self, id: ParamId) -> (&[T], &mut [T]) {
        (&self.values[id.0], &mut self.grads[id.0])
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.f64() * g.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn values_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    pub fn grads_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }

    /// True when both stores hold the same names and shapes in the same order.
    pub fn same_layout<U: Real>(&self, other: &ParamStore<U>) -> bool {
        self.names == other.names && self.shapes == other.shapes
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            values: self.values.iter().map(conv).collect(),
            grads: self.grads.iter().map(conv).collect(),
        }
    }

    /// Copies values (not gradients) from a store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) {
        assert!(self.same_layout(other), "layout mismatch");
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.copy_from_slice(src);
        }
    }
}

/// A scalar training loss over a batch, with its hand-derived gradient.
pub trait Objective {
    type Batch;

    /// Loss value, accumulated in `f64`.
    fn loss<T: Real>(&self, params: &ParamStore<T>, batch: &Self::Batch) -> Result<f64>;

    /// Loss value; gradients are added into the (already zeroed) buffers of
    /// `params`.
    fn loss_and_grad<T: Real>(&self, params: &mut ParamStore<T>, batch: &Self::Batch)
        -> Result<f64>;
}

/// Returns `value` or a [`Error::NonFinite`] naming `term`.
pub fn finite(term: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(term.to_string()))
    }
}

/// Zeroes the gradient buffers, then evaluates loss and gradients.
pub fn value_and_grad<O: Objective, T: Real>(
    objective: &O,
    params: &mut ParamStore<T>,
    batch: &O::Batch,
) -> Result<f64> {
    params.zero_grad();
    let loss = finite("loss", objective.loss_and_grad(params, batch)?)?;
    if !params.grads_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(loss)
}

/// Largest relative error between reverse-mode gradients and central
/// differences with step `h`, over `probes` randomly chosen scalars.
///
/// The check runs in `f64`. Gradients below `1e-6` in magnitude are compared
/// against that floor instead of their own size.
pub fn grad_check<O: Objective, R: Rng>(
    objective: &O,
    params: &ParamStore<f32>,
    batch: &O::Batch,
    h: f64,
    probes: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut p64: ParamStore<f64> = params.cast();
    value_and_grad(objective, &mut p64, batch)?;
    let total = p64.scalar_count();
    if total == 0 {
        return Ok(0.0);
    }
    let offsets: Vec<usize> = p64
        .values
        .iter()
        .scan(0, |acc, v| {
            let start = *acc;
            *acc += v.len();
            Some(start)
        })
        .collect();
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let flat = rng.random_range(0..total);
        let pi = offsets.partition_point(|&o| o <= flat) - 1;
        let idx = flat - offsets[pi];
        let id = ParamId(pi);
        let analytic = p64.grad(id)[idx];
        let orig = p64.value(id)[idx];
        p64.value_mut(id)[idx] = orig + h;
        let up = objective.loss(&p64, batch)?;
        p64.value_mut(id)[idx] = orig - h;
        let down = objective.loss(&p64, batch)?;
        p64.value_mut(id)[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// `½‖w‖² + ⟨c, v⟩`: gradient `w` for `w`, `c` for `v`, zero for `u`.
    struct Quadratic;

    impl Objective for Quadratic {
        type Batch = Vec<f64>;

        fn loss<T: Real>(&self, p: &ParamStore<T>, c: &Vec<f64>) -> Result<f64> {
            let w = p.value(ParamId(0));
            let v = p.value(ParamId(1));
            let half: f64 = w.iter().map(|x| 0.5 * x.f64() * x.f64()).sum();
            let lin: f64 = v.iter().zip(c).map(|(x, c)| x.f64() * c).sum();
            Ok(half + lin)
        }

        fn loss_and_grad<T: Real>(&self, p: &mut ParamStore<T>, c: &Vec<f64>) -> Result<f64> {
            let l = self.loss(p, c)?;
            let (w, gw) = p.split(ParamId(0));
            for (g, x) in gw.iter_mut().zip(w) {
                *g += *x;
            }
            let gv = p.grad_mut(ParamId(1));
            for (g, c) in gv.iter_mut().zip(c) {
                *g += T::of(*c);
            }
            Ok(l)
        }
    }

    fn quad_store() -> ParamStore {
        let mut ps = ParamStore::new();
        ps.add("w", &[3], vec![1.0, -2.0, 0.5]);
        ps.add("v", &[2], vec![0.3, 0.7]);
        ps.add("u", &[2], vec![4.0, 4.0]);
        ps
    }

    #[test]
    fn quadratic_gradient_is_w_and_unused_is_zero() {
        let mut ps = quad_store();
        let loss = value_and_grad(&Quadratic, &mut ps, &vec![2.0, -1.0]).unwrap();
        assert!((loss - (0.5 * 5.25 + 0.6 - 0.7)).abs() < 1e-6);
        assert_eq!(ps.grad(ParamId(0)), &[1.0, -2.0, 0.5]);
        assert_eq!(ps.grad(ParamId(1)), &[2.0, -1.0]);
        assert_eq!(ps.grad(ParamId(2)), &[0.0, 0.0]);
    }

    #[test]
    fn linear_loss_grad_check_at_machine_precision() {
        struct Lin;
        impl Objective for Lin {
            type Batch = ();
            fn loss<T: Real>(&self, p: &ParamStore<T>, _: &()) -> Result<f64> {
                Ok(p.value(ParamId(0))
                    .iter()
                    .enumerate()
                    .map(|(i, x)| (i as f64 + 1.0) * x.f64())
                    .sum())
            }
            fn loss_and_grad<T: Real>(&self, p: &mut ParamStore<T>, b: &()) -> Result<f64> {
                for (i, g) in p.grad_mut(ParamId(0)).iter_mut().enumerate() {
                    *g += T::of(i as f64 + 1.0);
                }
                self.loss(p, b)
            }
        }
        let mut ps = ParamStore::new();
        ps.add("a", &[5], vec![0.1, 0.2, -0.3, 4.0, 5.0]);
        let err = grad_check(&Lin, &ps, &(), 1e-3, 20, &mut rng::seeded(1)).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut ps = quad_store();
        ps.value_mut(ParamId(0))[0] = f32::INFINITY;
        let err = value_and_grad(&Quadratic, &mut ps, &vec![0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn gemm_transpose_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                naive[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![1.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, true);
                for (x, y) in c.iter().zip(&naive) {
                    assert!((x - 1.0 - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn cast_round_trip_preserves_f32_values() {
        let ps = quad_store();
        let back: ParamStore<f32> = ps.cast::<f64>().cast();
        assert_eq!(back, ps);
        assert!(ps.same_layout(&ps.cast::<f64>()));
    }
}
