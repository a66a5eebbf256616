//! LSTM layers with explicit backpropagation through time.
//!
//! Gate layout inside the fused weight matrices is `[input, forget, cell, output]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{dropout_mask, mat_vec_t_acc, outer_acc, sigmoid, vec_mat_acc, Grads, Mode, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmState<S> {
    pub h: Vec<S>,
    pub c: Vec<S>,
}

impl<S: Scalar> LstmState<S> {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![S::zero(); hidden],
            c: vec![S::zero(); hidden],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct LstmCache<S> {
    steps: usize,
    reverse: bool,
    /// Activated gates per position, `T × 4H`.
    gates: Vec<S>,
    c: Vec<S>,
    tanh_c: Vec<S>,
    /// Hidden state per original position, `T × H`.
    h: Vec<S>,
    init: LstmState<S>,
}

impl<S: Scalar> LstmCache<S> {
    pub fn outputs(&self) -> &[S] {
        &self.h
    }

    /// State after the last processed position.
    pub fn final_state(&self, hidden: usize) -> LstmState<S> {
        let last = if self.reverse { 0 } else { self.steps - 1 };
        LstmState {
            h: self.h[last * hidden..(last + 1) * hidden].to_vec(),
            c: self.c[last * hidden..(last + 1) * hidden].to_vec(),
        }
    }
}

impl Lstm {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(format!("{name}.w_ih"), Tensor::uniform(&[input, 4 * hidden], bound, rng));
        let w_hh = store.add(format!("{name}.w_hh"), Tensor::uniform(&[hidden, 4 * hidden], bound, rng));
        let mut b = Tensor::zeros(&[4 * hidden]);
        for v in &mut b.data_mut()[hidden..2 * hidden] {
            *v = S::one();
        }
        let bias = store.add(format!("{name}.bias"), b);
        Lstm {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        }
    }

    /// Runs the layer over `x` (`steps × input`, row-major). With `reverse`
    /// the sequence is consumed right to left but outputs stay aligned with
    /// their input positions.
    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        x: &[S],
        steps: usize,
        init: Option<&LstmState<S>>,
        reverse: bool,
    ) -> LstmCache<S> {
        let hs = self.hidden;
        let w_ih = store.get(self.w_ih).data();
        let w_hh = store.get(self.w_hh).data();
        let bias = store.get(self.bias).data();
        debug_assert_eq!(x.len(), steps * self.input);

        let init = init.cloned().unwrap_or_else(|| LstmState::zeros(hs));
        let mut gates = vec![S::zero(); steps * 4 * hs];
        let mut c_all = vec![S::zero(); steps * hs];
        let mut tanh_all = vec![S::zero(); steps * hs];
        let mut h_all = vec![S::zero(); steps * hs];
        let mut h_prev = init.h.clone();
        let mut c_prev = init.c.clone();

        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            let z = &mut gates[t * 4 * hs..(t + 1) * 4 * hs];
            z.copy_from_slice(bias);
            vec_mat_acc(&x[t * self.input..(t + 1) * self.input], w_ih, z);
            vec_mat_acc(&h_prev, w_hh, z);
            for j in 0..hs {
                z[j] = sigmoid(z[j]);
                z[hs + j] = sigmoid(z[hs + j]);
                z[2 * hs + j] = z[2 * hs + j].tanh();
                z[3 * hs + j] = sigmoid(z[3 * hs + j]);
            }
            for j in 0..hs {
                let c = z[hs + j] * c_prev[j] + z[j] * z[2 * hs + j];
                let tc = c.tanh();
                c_all[t * hs + j] = c;
                tanh_all[t * hs + j] = tc;
                h_all[t * hs + j] = z[3 * hs + j] * tc;
            }
            h_prev.copy_from_slice(&h_all[t * hs..(t + 1) * hs]);
            c_prev.copy_from_slice(&c_all[t * hs..(t + 1) * hs]);
        }

        LstmCache {
            steps,
            reverse,
            gates,
            c: c_all,
            tanh_c: tanh_all,
            h: h_all,
            init,
        }
    }

    /// Backpropagates `dh` (`steps × hidden`, per output position) and an
    /// optional gradient on the final state. Parameter gradients are
    /// accumulated into `grads`; returns `(dx, d_init)`.
    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        cache: &LstmCache<S>,
        x: &[S],
        dh: &[S],
        d_final: Option<&LstmState<S>>,
        grads: &mut Grads<S>,
    ) -> (Vec<S>, LstmState<S>) {
        let hs = self.hidden;
        let steps = cache.steps;
        let w_ih = store.get(self.w_ih).data();
        let w_hh = store.get(self.w_hh).data();

        let mut dx = vec![S::zero(); steps * self.input];
        let (mut dh_carry, mut dc_carry) = match d_final {
            Some(s) => (s.h.clone(), s.c.clone()),
            None => (vec![S::zero(); hs], vec![S::zero(); hs]),
        };
        let mut dz = vec![S::zero(); 4 * hs];
        let mut d_w_ih = vec![S::zero(); w_ih.len()];
        let mut d_w_hh = vec![S::zero(); w_hh.len()];
        let mut d_bias = vec![S::zero(); 4 * hs];

        for k in (0..steps).rev() {
            let t = if cache.reverse { steps - 1 - k } else { k };
            let prev = if k == 0 {
                None
            } else if cache.reverse {
                Some(t + 1)
            } else {
                Some(t - 1)
            };
            let (h_prev, c_prev): (&[S], &[S]) = match prev {
                Some(p) => (&cache.h[p * hs..(p + 1) * hs], &cache.c[p * hs..(p + 1) * hs]),
                None => (&cache.init.h, &cache.init.c),
            };
            let g = &cache.gates[t * 4 * hs..(t + 1) * 4 * hs];
            let tc = &cache.tanh_c[t * hs..(t + 1) * hs];
            for j in 0..hs {
                let (ig, fg, cg, og) = (g[j], g[hs + j], g[2 * hs + j], g[3 * hs + j]);
                let dhj = dh[t * hs + j] + dh_carry[j];
                let d_o = dhj * tc[j];
                let dc = dhj * og * (S::one() - tc[j] * tc[j]) + dc_carry[j];
                dz[j] = dc * cg * ig * (S::one() - ig);
                dz[hs + j] = dc * c_prev[j] * fg * (S::one() - fg);
                dz[2 * hs + j] = dc * ig * (S::one() - cg * cg);
                dz[3 * hs + j] = d_o * og * (S::one() - og);
                dc_carry[j] = dc * fg;
            }
            let xt = &x[t * self.input..(t + 1) * self.input];
            outer_acc(xt, &dz, &mut d_w_ih);
            outer_acc(h_prev, &dz, &mut d_w_hh);
            for (b, &d) in d_bias.iter_mut().zip(&dz) {
                *b += d;
            }
            mat_vec_t_acc(w_ih, &dz, &mut dx[t * self.input..(t + 1) * self.input]);
            dh_carry.iter_mut().for_each(|v| *v = S::zero());
            mat_vec_t_acc(w_hh, &dz, &mut dh_carry);
        }

        add_into(grads.buf_mut(self.w_ih), &d_w_ih);
        add_into(grads.buf_mut(self.w_hh), &d_w_hh);
        add_into(grads.buf_mut(self.bias), &d_bias);
        (dx, LstmState { h: dh_carry, c: dc_carry })
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Stack of bidirectional LSTM layers with inverted dropout between layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiLstm {
    pub layers: Vec<(Lstm, Lstm)>,
    pub hidden: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
struct BiLayerCache<S> {
    input: Vec<S>,
    mask: Option<Vec<S>>,
    fwd: LstmCache<S>,
    bwd: LstmCache<S>,
}

#[derive(Clone, Debug)]
pub struct BiLstmCache<S> {
    steps: usize,
    layers: Vec<BiLayerCache<S>>,
}

impl BiLstm {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        input: usize,
        hidden: usize,
        num_layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let d = if l == 0 { input } else { 2 * hidden };
                let f = Lstm::new(store, &format!("{name}.l{l}.fwd"), d, hidden, rng);
                let b = Lstm::new(store, &format!("{name}.l{l}.bwd"), d, hidden, rng);
                (f, b)
            })
            .collect();
        BiLstm {
            layers,
            hidden,
            dropout,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Encodes `emb` (`T × d`) into `T × 2H` by concatenating forward and
    /// backward states at each position.
    pub fn encode<S: Scalar, R: Rng + ?Sized>(
        &self,
        store: &ParamStore<S>,
        emb: &Tensor<S>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<S>, BiLstmCache<S>)> {
        if emb.shape().len() != 2 {
            return Err(Error::Precondition("embedding input must be T×d".into()));
        }
        let steps = emb.rows();
        let hs = self.hidden;
        let first_in = self.layers.first().map_or(0, |l| l.0.input);
        if emb.cols() != first_in {
            return Err(Error::dim(emb.shape(), &[steps, first_in], "bilstm input width"));
        }
        let mut x = emb.data().to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, (f, b)) in self.layers.iter().enumerate() {
            let mask = if l > 0 && mode == Mode::Train && self.dropout > 0.0 {
                let m = dropout_mask(x.len(), self.dropout, rng);
                for (v, &k) in x.iter_mut().zip(&m) {
                    *v *= k;
                }
                Some(m)
            } else {
                None
            };
            let fc = f.forward(store, &x, steps, None, false);
            let bc = b.forward(store, &x, steps, None, true);
            let mut out = Vec::with_capacity(steps * 2 * hs);
            for t in 0..steps {
                out.extend_from_slice(&fc.outputs()[t * hs..(t + 1) * hs]);
                out.extend_from_slice(&bc.outputs()[t * hs..(t + 1) * hs]);
            }
            caches.push(BiLayerCache {
                input: std::mem::replace(&mut x, out),
                mask,
                fwd: fc,
                bwd: bc,
            });
        }
        Ok((
            Tensor::new(&[steps, 2 * hs], x)?,
            BiLstmCache {
                steps,
                layers: caches,
            },
        ))
    }

    /// Returns `∂L/∂emb` given `∂L/∂output`.
    pub fn backward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        cache: &BiLstmCache<S>,
        d_out: &[S],
        grads: &mut Grads<S>,
    ) -> Vec<S> {
        let hs = self.hidden;
        let steps = cache.steps;
        let mut d = d_out.to_vec();
        for ((f, b), lc) in self.layers.iter().zip(&cache.layers).rev() {
            let mut dh_f = Vec::with_capacity(steps * hs);
            let mut dh_b = Vec::with_capacity(steps * hs);
            for t in 0..steps {
                dh_f.extend_from_slice(&d[t * 2 * hs..t * 2 * hs + hs]);
                dh_b.extend_from_slice(&d[t * 2 * hs + hs..(t + 1) * 2 * hs]);
            }
            let (mut dx, _) = f.backward(store, &lc.fwd, &lc.input, &dh_f, None, grads);
            let (dx_b, _) = b.backward(store, &lc.bwd, &lc.input, &dh_b, None, grads);
            add_into(&mut dx, &dx_b);
            if let Some(m) = &lc.mask {
                for (v, &k) in dx.iter_mut().zip(m) {
                    *v *= k;
                }
            }
            d = dx;
        }
        d
    }
}

/// Functional entry point: `T × d` embeddings to `T × 2H` states.
pub fn bilstm_encode<S: Scalar, R: Rng + ?Sized>(
    store: &ParamStore<S>,
    encoder: &BiLstm,
    emb: &Tensor<S>,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<S>, BiLstmCache<S>)> {
    encoder.encode(store, emb, mode, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let enc = BiLstm::new(&mut store, "enc", 5, 4, 2, 0.0, &mut rng);
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let emb = Tensor::uniform(&[3, 5], 1.0, &mut rng);
        let (out, _) = bilstm_encode(&store, &enc, &emb, Mode::Eval, &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_two_layers_size_200() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let enc = BiLstm::new(&mut store, "enc", 8, 200, 2, 0.3, &mut rng);
        let emb = Tensor::uniform(&[3, 8], 1.0, &mut rng);
        let (out, _) = enc.encode(&store, &emb, Mode::Eval, &mut rng).unwrap();
        assert_eq!(out.shape(), &[3, 400]);
    }

    #[test]
    fn empty_sequence_rejected() {
        assert!(Tensor::<f32>::new(&[0, 4], vec![]).is_err());
    }

    #[test]
    fn seeded_dropout_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let enc = BiLstm::new(&mut store, "enc", 3, 4, 2, 0.3, &mut rng);
        let emb = Tensor::uniform(&[5, 3], 1.0, &mut rng);
        let run = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            enc.encode(&store, &emb, Mode::Train, &mut r).unwrap().0
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    /// Weighted sum of outputs as a scalar loss; compares BPTT with central
    /// differences on T=4, H=3.
    #[test]
    fn bilstm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let enc = BiLstm::new(&mut store, "enc", 2, 3, 2, 0.0, &mut rng);
        let emb = Tensor::<f64>::uniform(&[4, 2], 1.0, &mut rng);
        let weights: Vec<f64> = (0..4 * 6).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let f = |s: &ParamStore<f64>| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let (out, cache) = enc.encode(s, &emb, Mode::Eval, &mut r).unwrap();
            let loss: f64 = out.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
            let mut g = s.zero_grads();
            enc.backward(s, &cache, &weights, &mut g);
            (loss, g)
        };
        let err = grad_check(f, &mut store, 1e-3).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn lstm_initial_and_final_state_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let lstm = Lstm::new(&mut store, "l", 2, 3, &mut rng);
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let h0: Vec<f64> = vec![0.2, -0.1, 0.4];
        let c0: Vec<f64> = vec![-0.3, 0.5, 0.1];
        let loss = |h0: &[f64], c0: &[f64]| {
            let init = LstmState { h: h0.to_vec(), c: c0.to_vec() };
            let cache = lstm.forward(&store, &x, 4, Some(&init), false);
            let fin = cache.final_state(3);
            cache.outputs().iter().sum::<f64>() + fin.c.iter().map(|v| 2.0 * v).sum::<f64>()
        };
        let init = LstmState { h: h0.clone(), c: c0.clone() };
        let cache = lstm.forward(&store, &x, 4, Some(&init), false);
        let mut g = store.zero_grads();
        let d_final = LstmState { h: vec![0.0; 3], c: vec![2.0; 3] };
        let (_, d_init) = lstm.backward(&store, &cache, &x, &[1.0; 12], Some(&d_final), &mut g);
        let eps = 1e-6;
        for j in 0..3 {
            let mut hp = h0.clone();
            hp[j] += eps;
            let mut hm = h0.clone();
            hm[j] -= eps;
            let num = (loss(&hp, &c0) - loss(&hm, &c0)) / (2.0 * eps);
            assert!((num - d_init.h[j]).abs() < 1e-6);
            let mut cp = c0.clone();
            cp[j] += eps;
            let mut cm = c0.clone();
            cm[j] -= eps;
            let num = (loss(&h0, &cp) - loss(&h0, &cm)) / (2.0 * eps);
            assert!((num - d_init.c[j]).abs() < 1e-6);
        }
    }
}
