//! Noisy sequence autoencoder: an LSTM encoder whose final state seeds an
//! LSTM decoder (no attention). Paraphrases come from perturbing the final
//! encoder state with Gaussian noise and beam-searching the decoder.

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{dedupe, Beam, ParaphraseSet, Source};
use crate::corpus::{build_vocab, Utterance, Vocab};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::seed::{self, stream};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{
    clip_global_norm, log_softmax, mat_vec_t_acc, outer_acc, softmax_cross_entropy, vec_mat_acc, Grads, Lstm, LstmState, OptimState, Optimizer,
    OptimizerKind, ParamId, ParamStore, Scalar, Tensor,
};

const PAD: usize = Vocab::PAD_ID;
const BOS: usize = Vocab::BOS_ID;
const EOS: usize = Vocab::EOS_ID;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    pub hidden_size: usize,
    pub embedding_dim: usize,
    /// Fixed decode limit; `None` means twice the input length plus 5.
    pub max_decode_len: Option<usize>,
    pub noise_sigma: f64,
    pub beam_width: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            hidden_size: 128,
            embedding_dim: 64,
            max_decode_len: None,
            noise_sigma: 0.3,
            beam_width: 5,
            epochs: 30,
            learning_rate: 0.01,
            batch_size: 32,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.embedding_dim == 0 || self.epochs == 0 || self.batch_size == 0 || self.beam_width == 0 {
            return Err(Error::Precondition("autoencoder sizes, epochs and beam width must be positive".into()));
        }
        if self.max_decode_len == Some(0) {
            return Err(Error::Precondition("max_decode_len must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Precondition("noise_sigma must be finite and ≥ 0".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Precondition("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqNet {
    pub embedding: ParamId,
    pub encoder: Lstm,
    pub decoder: Lstm,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub vocab_size: usize,
    pub embedding_dim: usize,
}

impl Seq2SeqNet {
    pub fn build<S: Scalar, R: rand::Rng + ?Sized>(store: &mut ParamStore<S>, cfg: &AutoencoderConfig, vocab_size: usize, rng: &mut R) -> Self {
        let e = cfg.embedding_dim;
        let h = cfg.hidden_size;
        let embedding = store.add("embedding", Tensor::uniform(&[vocab_size, e], 0.1, rng));
        let encoder = Lstm::new(store, "encoder", e, h, rng);
        let decoder = Lstm::new(store, "decoder", e, h, rng);
        let bound = (6.0 / (h + vocab_size) as f64).sqrt();
        let out_w = store.add("out.w", Tensor::uniform(&[h, vocab_size], bound, rng));
        let out_b = store.add("out.b", Tensor::zeros(&[vocab_size]));
        Seq2SeqNet {
            embedding,
            encoder,
            decoder,
            out_w,
            out_b,
            vocab_size,
            embedding_dim: e,
        }
    }

    fn embed<S: Scalar>(&self, store: &ParamStore<S>, ids: &[usize]) -> Vec<S> {
        let e = self.embedding_dim;
        let table = store.get(self.embedding).data();
        ids.iter().flat_map(|&i| table[i * e..(i + 1) * e].iter().copied()).collect()
    }

    pub fn encode<S: Scalar>(&self, store: &ParamStore<S>, ids: &[usize]) -> LstmState<S> {
        let x = self.embed(store, ids);
        self.encoder.forward(store, &x, ids.len(), None, false).final_state(self.encoder.hidden)
    }

    /// One decoder step: next-token logits and the new state.
    pub fn step<S: Scalar>(&self, store: &ParamStore<S>, token: usize, state: &LstmState<S>) -> (Vec<S>, LstmState<S>) {
        let x = self.embed(store, &[token]);
        let next = self.decoder.forward(store, &x, 1, Some(state), false).final_state(self.decoder.hidden);
        let mut logits = store.get(self.out_b).data().to_vec();
        vec_mat_acc(&next.h, store.get(self.out_w).data(), &mut logits);
        (logits, next)
    }

    /// Teacher-forced reconstruction loss (mean over decoder steps) with
    /// gradients accumulated into `grads`.
    pub fn reconstruction<S: Scalar>(&self, store: &ParamStore<S>, ids: &[usize], grads: &mut Grads<S>) -> Result<S> {
        if ids.is_empty() {
            return Err(Error::Precondition("cannot reconstruct an empty sentence".into()));
        }
        let h = self.encoder.hidden;
        let v = self.vocab_size;
        let e = self.embedding_dim;
        let x_enc = self.embed(store, ids);
        let enc = self.encoder.forward(store, &x_enc, ids.len(), None, false);
        let init = enc.final_state(h);

        let mut dec_in = vec![BOS];
        dec_in.extend_from_slice(ids);
        let mut targets = ids.to_vec();
        targets.push(EOS);
        let steps = dec_in.len();
        let x_dec = self.embed(store, &dec_in);
        let dec = self.decoder.forward(store, &x_dec, steps, Some(&init), false);
        let hs = dec.outputs();

        let out_w = store.get(self.out_w).data();
        let out_b = store.get(self.out_b).data();
        let scale = S::lit(1.0 / steps as f64);
        let mut loss = S::zero();
        let mut dh = vec![S::zero(); steps * h];
        for t in 0..steps {
            let mut logits = out_b.to_vec();
            vec_mat_acc(&hs[t * h..(t + 1) * h], out_w, &mut logits);
            let (l, mut g) = softmax_cross_entropy(&logits, targets[t])?;
            loss += l;
            g.iter_mut().for_each(|x| *x *= scale);
            outer_acc(&hs[t * h..(t + 1) * h], &g, grads.buf_mut(self.out_w));
            grads.buf_mut(self.out_b).iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
            mat_vec_t_acc(out_w, &g, &mut dh[t * h..(t + 1) * h]);
        }
        debug_assert_eq!(out_b.len(), v);
        let (dx_dec, d_init) = self.decoder.backward(store, &dec, &x_dec, &dh, None, grads);
        let zeros = vec![S::zero(); ids.len() * h];
        let (dx_enc, _) = self.encoder.backward(store, &enc, &x_enc, &zeros, Some(&d_init), grads);
        let table = grads.buf_mut(self.embedding);
        for (ids, dx) in [(&dec_in[..], &dx_dec), (ids, &dx_enc)] {
            for (t, &id) in ids.iter().enumerate() {
                for (g, &d) in table[id * e..(id + 1) * e].iter_mut().zip(&dx[t * e..(t + 1) * e]) {
                    *g += d;
                }
            }
        }
        Ok(loss * scale)
    }
}

#[derive(Clone, Debug)]
pub struct Seq2SeqModel {
    pub config: AutoencoderConfig,
    pub vocab: Vocab,
    pub net: Seq2SeqNet,
    pub params: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    config: AutoencoderConfig,
    vocab: Vocab,
}

const GRAD_CHUNKS: usize = 4;

/// Trains the autoencoder to reconstruct `corpus`. Returns the model and the
/// mean reconstruction loss of each epoch.
pub fn train_autoencoder(corpus: &[Utterance], cfg: &AutoencoderConfig, exec: Execution) -> Result<(Seq2SeqModel, Vec<f64>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::NoTrainingData);
    }
    let vocab = build_vocab(corpus.iter().map(|u| u.tokens.as_slice()), 1);
    let mut model = Seq2SeqModel::new(cfg.clone(), vocab)?;
    let data: Vec<Vec<usize>> = corpus.iter().map(|u| model.vocab.encode(&u.tokens)).collect();
    let optimizer = Optimizer::new(OptimizerKind::default(), cfg.learning_rate, 0.0)?;
    let mut state = OptimState::new(&model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[stream::SHUFFLE_CLEAN, epoch as u64]));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let chunk = batch.len().div_ceil(GRAD_CHUNKS);
            let net = &model.net;
            let params = &model.params;
            let parts = exec.map_range(GRAD_CHUNKS, |c| -> Result<(f64, Grads<f32>)> {
                let mut g = params.zero_grads();
                let mut loss = 0.0;
                for &i in batch.iter().skip(c * chunk).take(chunk) {
                    loss += net.reconstruction(params, &data[i], &mut g)?.as_f64();
                }
                Ok((loss, g))
            });
            let mut grads = params.zero_grads();
            let mut loss = 0.0;
            for p in parts {
                let (l, g) = p?;
                loss += l;
                grads.add_assign(&g);
            }
            let n = batch.len() as f64;
            grads.scale(1.0 / n as f32);
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Training(format!("autoencoder diverged at epoch {}, batch {b}", epoch + 1)));
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            model.params.load_grads(grads)?;
            optimizer.step(&mut model.params, &mut state)?;
            total += loss;
        }
        let mean = total / data.len() as f64;
        log::debug!("autoencoder epoch {} loss {mean:.4}", epoch + 1);
        history.push(mean);
    }
    for t in model.params.tensors_mut() {
        t.zero_grad();
    }
    Ok((model, history))
}

/// A decoded hypothesis. `score` is the log-probability divided by the
/// number of emitted tokens (end-of-sentence included).
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<String>,
    pub log_prob: f64,
    pub score: f64,
    pub truncated: bool,
}

struct Live {
    ids: Vec<usize>,
    state: LstmState<f32>,
    log_prob: f64,
}

impl Seq2SeqModel {
    pub fn new(config: AutoencoderConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[stream::INIT]));
        let mut params = ParamStore::new();
        let net = Seq2SeqNet::build(&mut params, &config, vocab.len(), &mut rng);
        Ok(Seq2SeqModel { config, vocab, net, params })
    }

    fn max_len(&self, input_len: usize) -> usize {
        self.config.max_decode_len.unwrap_or(2 * input_len + 5)
    }

    /// Final encoder state, perturbed by N(0, sigma²) on both h and c.
    fn initial_state(&self, utterance: &Utterance, sigma: f64, seed: u64) -> Result<LstmState<f32>> {
        if utterance.is_empty() {
            return Err(Error::Precondition("cannot encode an empty utterance".into()));
        }
        let ids = self.vocab.encode(&utterance.tokens);
        let mut state = self.net.encode(&self.params, &ids);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Precondition(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[stream::NOISE]));
            for v in state.h.iter_mut().chain(state.c.iter_mut()) {
                *v += normal.sample(&mut rng) as f32;
            }
        }
        Ok(state)
    }

    fn scores(&self, token: usize, state: &LstmState<f32>) -> (Vec<f64>, LstmState<f32>) {
        let (logits, next) = self.net.step(&self.params, token, state);
        let mut lp: Vec<f64> = log_softmax(&logits).into_iter().map(f64::from).collect();
        lp[PAD] = f64::NEG_INFINITY;
        lp[BOS] = f64::NEG_INFINITY;
        (lp, next)
    }

    fn finish(&self, ids: &[usize], log_prob: f64, truncated: bool) -> Hypothesis {
        let emitted = ids.len() + usize::from(!truncated);
        Hypothesis {
            tokens: ids.iter().map(|&i| self.vocab.token(i).to_string()).collect(),
            log_prob,
            score: log_prob / emitted.max(1) as f64,
            truncated,
        }
    }

    /// Step-by-step argmax decoding (ties to the lowest token id).
    pub fn greedy_decode(&self, utterance: &Utterance, sigma: f64, seed: u64) -> Result<Hypothesis> {
        let mut state = self.initial_state(utterance, sigma, seed)?;
        let mut ids = Vec::new();
        let mut log_prob = 0.0;
        let mut token = BOS;
        for _ in 0..self.max_len(utterance.len()) {
            let (lp, next) = self.scores(token, &state);
            let mut best = 0;
            for v in 1..lp.len() {
                if log_prob + lp[v] > log_prob + lp[best] {
                    best = v;
                }
            }
            log_prob += lp[best];
            if best == EOS {
                return Ok(self.finish(&ids, log_prob, false));
            }
            ids.push(best);
            token = best;
            state = next;
        }
        Ok(self.finish(&ids, log_prob, true))
    }

    /// Beam search of width `k`; hypotheses sorted by length-normalised score.
    pub fn beam_search(&self, utterance: &Utterance, sigma: f64, k: usize, seed: u64) -> Result<Vec<Hypothesis>> {
        if k == 0 {
            return Err(Error::Precondition("beam width must be ≥ 1".into()));
        }
        let init = self.initial_state(utterance, sigma, seed)?;
        let mut alive = vec![Live {
            ids: Vec::new(),
            state: init,
            log_prob: 0.0,
        }];
        let mut done: Vec<Hypothesis> = Vec::new();
        for _ in 0..self.max_len(utterance.len()) {
            let mut cands: Vec<(f64, usize, usize)> = Vec::new();
            let mut nexts = Vec::with_capacity(alive.len());
            for (b, live) in alive.iter().enumerate() {
                let token = live.ids.last().copied().unwrap_or(BOS);
                let (lp, next) = self.scores(token, &live.state);
                for (v, &l) in lp.iter().enumerate() {
                    if l.is_finite() {
                        cands.push((live.log_prob + l, b, v));
                    }
                }
                nexts.push(next);
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next_alive = Vec::new();
            for &(lp, b, v) in cands.iter().take(k) {
                if v == EOS {
                    done.push(self.finish(&alive[b].ids, lp, false));
                } else {
                    let mut ids = alive[b].ids.clone();
                    ids.push(v);
                    next_alive.push(Live {
                        ids,
                        state: nexts[b].clone(),
                        log_prob: lp,
                    });
                }
            }
            alive = next_alive;
            if alive.is_empty() || done.len() >= k {
                break;
            }
        }
        if done.len() < k {
            done.extend(alive.iter().map(|l| self.finish(&l.ids, l.log_prob, true)));
        }
        done.sort_by(|a, b| b.score.total_cmp(&a.score));
        done.truncate(k);
        Ok(done)
    }

    /// Noisy decode: beams of width `k` from the perturbed encoder state,
    /// with beams equal to the input removed.
    pub fn perturb_decode(&self, utterance: &Utterance, sigma: f64, k: usize, seed: u64) -> Result<ParaphraseSet> {
        let hyps = self.beam_search(utterance, sigma, k, seed)?;
        let beams = hyps
            .into_iter()
            .map(|h| Beam {
                text: h.tokens.join(" "),
                score: h.score,
                truncated: h.truncated,
            })
            .collect();
        let reference: HashSet<String> = [utterance.normalized()].into_iter().collect();
        Ok(ParaphraseSet {
            original_id: utterance.id.clone(),
            source: Source::Seq2Seq,
            beams: dedupe(beams, &reference),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            meta: serde_json::to_value(Meta {
                kind: "seq2seq".into(),
                config: self.config.clone(),
                vocab: self.vocab.clone(),
            })?,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut meta: Meta = serde_json::from_value(ck.meta.clone())?;
        if meta.kind != "seq2seq" {
            return Err(Error::Checkpoint(format!("expected a seq2seq checkpoint, found `{}`", meta.kind)));
        }
        meta.vocab.reindex();
        let mut m = Seq2SeqModel::new(meta.config, meta.vocab)?;
        ck.restore_into(&mut m.params)?;
        Ok(m)
    }
}
