//! Dense float arrays and the handful of differentiable operations the tagger
//! and the sequence autoencoder are built from.
//!
//! Everything is generic over [`Scalar`] so that the same kernels run in `f32`
//! for training and in `f64` for finite-difference gradient checks.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod checkpoint;
pub mod gradcheck;
pub mod lstm;
pub mod optim;

pub use gradcheck::grad_check;
pub use lstm::{bilstm_encode, BiLstm, BiLstmCache, Lstm, LstmCache, LstmState};
pub use optim::{clip_global_norm, Optimizer, OptimizerKind, OptimState};

pub trait Scalar:
    Float
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Training or evaluation. Dropout is only active in `Train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Precondition(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(shape, &[data.len()], "tensor data length"));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
            grad: None,
        }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Precondition("ragged rows".into()));
        }
        Tensor::new(&[rows.len(), cols], rows.concat())
    }

    pub fn vector(data: Vec<S>) -> Result<Self> {
        let n = data.len();
        Tensor::new(&[n], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    /// Uniform initialisation in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::lit(rng.random_range(-bound..=bound)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated (zeroed) on first access.
    pub fn grad_mut(&mut self) -> &mut [S] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![S::zero(); n])
    }

    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::dim(&self.shape, &[grad.len()], "gradient buffer"));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| T::lit(v.as_f64())).collect()),
        }
    }
}

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Grads<S> {
        Grads {
            bufs: self.tensors.iter().map(|t| vec![S::zero(); t.len()]).collect(),
        }
    }

    /// Moves accumulated gradients onto the tensors' grad buffers.
    pub fn load_grads(&mut self, grads: Grads<S>) -> Result<()> {
        if grads.bufs.len() != self.tensors.len() {
            return Err(Error::dim(
                &[self.tensors.len()],
                &[grads.bufs.len()],
                "parameter count",
            ));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads.bufs) {
            t.set_grad(g)?;
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<S = f32> {
    bufs: Vec<Vec<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn buf(&self, id: ParamId) -> &[S] {
        &self.bufs[id.0]
    }

    pub fn buf_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.bufs[id.0]
    }

    pub fn bufs(&self) -> &[Vec<S>] {
        &self.bufs
    }

    pub fn add_assign(&mut self, other: &Grads<S>) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for b in &mut self.bufs {
            for x in b.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> S {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .fold(S::zero(), |acc, &g| acc + g * g)
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|g| g.is_finite())
    }
}

// ----- kernels ---------------------------------------------------------------

/// `y[j] += Σ_i x[i] · w[i, j]` for row-major `w` of shape `x.len() × y.len()`.
#[inline]
pub(crate) fn vec_mat_acc<S: Scalar>(x: &[S], w: &[S], y: &mut [S]) {
    let n = y.len();
    debug_assert_eq!(w.len(), x.len() * n);
    for (i, &xi) in x.iter().enumerate() {
        if xi == S::zero() {
            continue;
        }
        let row = &w[i * n..(i + 1) * n];
        for (yj, &wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
}

/// `dx[i] += Σ_j w[i, j] · dy[j]`.
#[inline]
pub(crate) fn mat_vec_t_acc<S: Scalar>(w: &[S], dy: &[S], dx: &mut [S]) {
    let n = dy.len();
    debug_assert_eq!(w.len(), dx.len() * n);
    for (i, dxi) in dx.iter_mut().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        let mut acc = S::zero();
        for (&wij, &dyj) in row.iter().zip(dy) {
            acc += wij * dyj;
        }
        *dxi += acc;
    }
}

/// `dw[i, j] += x[i] · dy[j]`.
#[inline]
pub(crate) fn outer_acc<S: Scalar>(x: &[S], dy: &[S], dw: &mut [S]) {
    let n = dy.len();
    debug_assert_eq!(dw.len(), x.len() * n);
    for (i, &xi) in x.iter().enumerate() {
        if xi == S::zero() {
            continue;
        }
        let row = &mut dw[i * n..(i + 1) * n];
        for (dwij, &dyj) in row.iter_mut().zip(dy) {
            *dwij += xi * dyj;
        }
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

// ----- differentiable ops ----------------------------------------------------

fn check_affine<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<(usize, usize, usize)> {
    if x.shape.len() != 2 || w.shape.len() != 2 || b.shape.len() != 1 {
        return Err(Error::dim(&x.shape, &w.shape, "affine expects x[n×d_in], W[d_in×d_out], b[d_out]"));
    }
    let (n, d_in) = (x.shape[0], x.shape[1]);
    if w.shape[0] != d_in {
        return Err(Error::dim(&x.shape, &w.shape, "affine x·W"));
    }
    let d_out = w.shape[1];
    if b.shape[0] != d_out {
        return Err(Error::dim(&w.shape, &b.shape, "affine bias"));
    }
    Ok((n, d_in, d_out))
}

/// `y = x·W + b`.
pub fn affine<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, d_in, d_out) = check_affine(x, w, b)?;
    let mut out = Vec::with_capacity(n * d_out);
    for r in 0..n {
        let mut y = b.data.clone();
        vec_mat_acc(&x.data[r * d_in..(r + 1) * d_in], &w.data, &mut y);
        out.extend(y);
    }
    Tensor::new(&[n, d_out], out)
}

/// Backward of [`affine`]: accumulates `∂L/∂x`, `∂L/∂W`, `∂L/∂b` into the
/// tensors' grad buffers given `dy = ∂L/∂y`.
pub fn affine_backward<S: Scalar>(
    x: &mut Tensor<S>,
    w: &mut Tensor<S>,
    b: &mut Tensor<S>,
    dy: &Tensor<S>,
) -> Result<()> {
    let (n, d_in, d_out) = check_affine(x, w, b)?;
    if dy.shape != [n, d_out] {
        return Err(Error::dim(&dy.shape, &[n, d_out], "affine upstream gradient"));
    }
    let w_data = w.data.clone();
    let x_data = x.data.clone();
    let dx = x.grad_mut();
    for r in 0..n {
        mat_vec_t_acc(&w_data, dy.row(r), &mut dx[r * d_in..(r + 1) * d_in]);
    }
    let dw = w.grad_mut();
    for r in 0..n {
        outer_acc(&x_data[r * d_in..(r + 1) * d_in], dy.row(r), dw);
    }
    let db = b.grad_mut();
    for r in 0..n {
        for (g, &d) in db.iter_mut().zip(dy.row(r)) {
            *g += d;
        }
    }
    Ok(())
}

/// Numerically stable log-softmax.
pub fn log_softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
    logits.iter().map(|&v| v - lse).collect()
}

pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    log_softmax(logits).into_iter().map(S::exp).collect()
}

/// `−log softmax(logits)[target]` and its gradient `softmax − onehot`.
pub fn softmax_cross_entropy<S: Scalar>(logits: &[S], target: usize) -> Result<(S, Vec<S>)> {
    if target >= logits.len() {
        return Err(Error::Index {
            index: target,
            len: logits.len(),
        });
    }
    let lp = log_softmax(logits);
    let loss = -lp[target];
    let mut grad: Vec<S> = lp.into_iter().map(S::exp).collect();
    grad[target] -= S::one();
    Ok((loss, grad))
}

/// Mean squared difference.
pub fn mse<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::dim(&[a.len()], &[b.len()], "mse"));
    }
    let n = S::lit(a.len() as f64);
    Ok(a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<S>() / n)
}

/// Accumulates `scale · ∂mse/∂a` into `da` and `scale · ∂mse/∂b` into `db`.
pub fn mse_backward<S: Scalar>(a: &[S], b: &[S], scale: S, da: &mut [S], db: &mut [S]) {
    let k = S::lit(2.0 / a.len() as f64) * scale;
    for i in 0..a.len() {
        let g = k * (a[i] - b[i]);
        da[i] += g;
        db[i] -= g;
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1−p)`.
pub fn dropout_mask<S: Scalar, R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<S> {
    if p <= 0.0 {
        return vec![S::one(); n];
    }
    let keep = S::lit(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn affine_identity() {
        let y = affine(&t(&[1, 2], &[1., 2.]), &Tensor::identity(2), &t(&[2], &[0., 0.])).unwrap();
        assert_eq!(y.data(), &[1., 2.]);
    }

    #[test]
    fn affine_hand_computed() {
        let y = affine(&t(&[1, 2], &[1., 1.]), &t(&[2, 1], &[1., 1.]), &t(&[1], &[1.])).unwrap();
        assert_eq!(y.data(), &[3.]);
    }

    #[test]
    fn affine_bias_gradient_is_ones() {
        let mut x = t(&[3, 2], &[1., 2., 3., 4., 5., 6.]);
        let mut w = t(&[2, 4], &[0.5; 8]);
        let mut b = t(&[4], &[0.; 4]);
        let dy = Tensor::new(&[3, 4], vec![1.0; 12]).unwrap();
        affine_backward(&mut x, &mut w, &mut b, &dy).unwrap();
        // sum over rows of ones
        assert_eq!(b.grad().unwrap(), &[3.0; 4]);
        let mut x1 = t(&[1, 2], &[1., 2.]);
        let mut b1 = t(&[4], &[0.; 4]);
        let dy1 = Tensor::new(&[1, 4], vec![1.0; 4]).unwrap();
        affine_backward(&mut x1, &mut w, &mut b1, &dy1).unwrap();
        assert_eq!(b1.grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn affine_shape_mismatch_names_shapes() {
        let err = affine(&t(&[1, 3], &[1., 2., 3.]), &Tensor::identity(2), &t(&[2], &[0., 0.]))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let (loss, grad) = softmax_cross_entropy(&[0.0f64, 0.0], 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grad[0] + 0.5).abs() < 1e-12 && (grad[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_target_goes_to_zero() {
        let (loss, _) = softmax_cross_entropy(&[60.0f32, 0.0, -3.0], 0).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn cross_entropy_gradient_closed_form() {
        let logits = [0.3f64, -1.2, 2.0, 0.1];
        let (_, grad) = softmax_cross_entropy(&logits, 2).unwrap();
        let p = softmax(&logits);
        for i in 0..4 {
            let expect = p[i] - if i == 2 { 1.0 } else { 0.0 };
            assert!((grad[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0f32, 1.0], 2),
            Err(Error::Index { index: 2, len: 2 })
        ));
    }

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&[1.0f64, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(mse(&[1.0f32], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        let mut x = Tensor::<f32>::zeros(&[2, 3]);
        assert_eq!(x.grad_mut().len(), 6);
        assert!(x.set_grad(vec![0.0; 5]).is_err());
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m: Vec<f32> = dropout_mask(10_000, 0.3, &mut rng);
        let kept = m.iter().filter(|&&v| v > 0.0).count();
        assert!((6500..7500).contains(&kept));
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-6));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cross_entropy_shift_invariant(
                logits in prop::collection::vec(-5.0f64..5.0, 2..8),
                shift in -50.0f64..50.0,
                t in 0usize..8,
            ) {
                let t = t % logits.len();
                let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
                let (a, _) = softmax_cross_entropy(&logits, t).unwrap();
                let (b, _) = softmax_cross_entropy(&shifted, t).unwrap();
                prop_assert!((a - b).abs() < 1e-6);
            }

            #[test]
            fn mse_symmetric(pair in prop::collection::vec((-3.0f32..3.0, -3.0f32..3.0), 1..10)) {
                let (a, b): (Vec<f32>, Vec<f32>) = pair.into_iter().unzip();
                prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
            }
        }
    }
}
