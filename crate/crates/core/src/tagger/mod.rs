//! Joint intent classifier and slot tagger: token embeddings, a stacked
//! biLSTM encoder, an intent projection over the sentence representation and
//! a per-token slot projection.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelSpace, Vocab};
use crate::error::{Error, Result};
use crate::pairing::SentenceLogits;
use crate::seed::{self, stream};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{dropout_mask, mat_vec_t_acc, outer_acc, vec_mat_acc, BiLstm, BiLstmCache, Grads, Mode, OptimizerKind, ParamId, ParamStore, Scalar, Tensor};

mod eval;
pub mod train;

pub use eval::{ensemble_predict, exact_match, predict, self_train_tag, spans_match, Prediction};
pub use train::{train, EpochRecord, History, TrainInputs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaggerConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub embedding_dim: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub min_count: usize,
    pub optimizer: OptimizerKind,
    pub clip_norm: f64,
    /// Keep the epoch with the best clean dev exact match.
    pub select_on_dev: bool,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            hidden_size: 200,
            num_layers: 2,
            dropout: 0.3,
            learning_rate: 0.01,
            weight_decay: 0.001,
            epochs: 20,
            embedding_dim: 128,
            batch_size: 32,
            seed: 0,
            min_count: 1,
            optimizer: OptimizerKind::default(),
            clip_norm: 5.0,
            select_on_dev: true,
        }
    }
}

impl TaggerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("num_layers", self.num_layers),
            ("epochs", self.epochs),
            ("embedding_dim", self.embedding_dim),
            ("batch_size", self.batch_size),
            ("min_count", self.min_count),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Precondition(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Precondition(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Precondition("learning_rate and clip_norm must be > 0, weight_decay ≥ 0".into()));
        }
        Ok(())
    }
}

/// Parameter layout of the network. Holds handles only; values live in a
/// [`ParamStore`] so the same layout can run in `f32` or `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerNet {
    pub embedding: ParamId,
    pub encoder: BiLstm,
    pub intent_w: ParamId,
    pub intent_b: ParamId,
    pub slot_w: ParamId,
    pub slot_b: ParamId,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub num_intents: usize,
    pub num_tags: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct ForwardCache<S> {
    ids: Vec<usize>,
    emb: Tensor<S>,
    enc: BiLstmCache<S>,
    /// Encoder output after dropout, `T × 2H`.
    states: Vec<S>,
    mask: Option<Vec<S>>,
    sentence: Vec<S>,
}

impl TaggerNet {
    pub fn build<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        cfg: &TaggerConfig,
        vocab_size: usize,
        num_intents: usize,
        num_tags: usize,
        rng: &mut R,
    ) -> Self {
        let embedding = store.add("embedding", Tensor::uniform(&[vocab_size, cfg.embedding_dim], 0.1, rng));
        let encoder = BiLstm::new(store, "encoder", cfg.embedding_dim, cfg.hidden_size, cfg.num_layers, cfg.dropout, rng);
        let d = encoder.output_dim();
        let xavier = |a: usize, b: usize| (6.0 / (a + b) as f64).sqrt();
        let intent_w = store.add("intent.w", Tensor::uniform(&[d, num_intents], xavier(d, num_intents), rng));
        let intent_b = store.add("intent.b", Tensor::zeros(&[num_intents]));
        let slot_w = store.add("slot.w", Tensor::uniform(&[d, num_tags], xavier(d, num_tags), rng));
        let slot_b = store.add("slot.b", Tensor::zeros(&[num_tags]));
        TaggerNet {
            embedding,
            encoder,
            intent_w,
            intent_b,
            slot_w,
            slot_b,
            vocab_size,
            embedding_dim: cfg.embedding_dim,
            num_intents,
            num_tags,
            dropout: cfg.dropout,
        }
    }

    fn hidden(&self) -> usize {
        self.encoder.hidden
    }

    /// Intent and per-token slot logits for a sequence of vocabulary ids.
    /// `dropout_seed` drives every dropout mask in train mode.
    pub fn forward<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        ids: &[usize],
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<(SentenceLogits<S>, ForwardCache<S>)> {
        if ids.is_empty() {
            return Err(Error::Precondition("cannot tag an empty utterance".into()));
        }
        let e = self.embedding_dim;
        let table = store.get(self.embedding).data();
        let mut rows = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= self.vocab_size {
                return Err(Error::Index { index: id, len: self.vocab_size });
            }
            rows.extend_from_slice(&table[id * e..(id + 1) * e]);
        }
        let emb = Tensor::new(&[ids.len(), e], rows)?;
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let (out, enc) = self.encoder.encode(store, &emb, mode, &mut rng)?;
        let mut states = out.into_data();
        let mask = if mode == Mode::Train && self.dropout > 0.0 {
            let m: Vec<S> = dropout_mask(states.len(), self.dropout, &mut rng);
            states.iter_mut().zip(&m).for_each(|(v, &k)| *v *= k);
            Some(m)
        } else {
            None
        };

        let h = self.hidden();
        let d = 2 * h;
        let t_last = ids.len() - 1;
        let mut sentence = Vec::with_capacity(d);
        sentence.extend_from_slice(&states[t_last * d..t_last * d + h]);
        sentence.extend_from_slice(&states[h..d]);

        let mut intent = store.get(self.intent_b).data().to_vec();
        vec_mat_acc(&sentence, store.get(self.intent_w).data(), &mut intent);

        let k = self.num_tags;
        let slot_w = store.get(self.slot_w).data();
        let slot_b = store.get(self.slot_b).data();
        let mut slots = Vec::with_capacity(ids.len() * k);
        for t in 0..ids.len() {
            let mut y = slot_b.to_vec();
            vec_mat_acc(&states[t * d..(t + 1) * d], slot_w, &mut y);
            slots.extend(y);
        }
        Ok((
            SentenceLogits { intent, slots, num_tags: k },
            ForwardCache {
                ids: ids.to_vec(),
                emb,
                enc,
                states,
                mask,
                sentence,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream logit gradients `d`.
    pub fn backward<S: Scalar>(&self, store: &ParamStore<S>, cache: &ForwardCache<S>, d: &SentenceLogits<S>, grads: &mut Grads<S>) {
        let h = self.hidden();
        let dd = 2 * h;
        let n = cache.ids.len();
        let k = self.num_tags;

        outer_acc(&cache.sentence, &d.intent, grads.buf_mut(self.intent_w));
        for (g, &v) in grads.buf_mut(self.intent_b).iter_mut().zip(&d.intent) {
            *g += v;
        }
        let mut d_sentence = vec![S::zero(); dd];
        mat_vec_t_acc(store.get(self.intent_w).data(), &d.intent, &mut d_sentence);

        let mut d_states = vec![S::zero(); n * dd];
        let slot_w = store.get(self.slot_w).data();
        for t in 0..n {
            let dy = &d.slots[t * k..(t + 1) * k];
            if dy.iter().all(|&v| v == S::zero()) {
                continue;
            }
            outer_acc(&cache.states[t * dd..(t + 1) * dd], dy, grads.buf_mut(self.slot_w));
            for (g, &v) in grads.buf_mut(self.slot_b).iter_mut().zip(dy) {
                *g += v;
            }
            mat_vec_t_acc(slot_w, dy, &mut d_states[t * dd..(t + 1) * dd]);
        }
        let t_last = n - 1;
        for j in 0..h {
            d_states[t_last * dd + j] += d_sentence[j];
            d_states[h + j] += d_sentence[h + j];
        }
        if let Some(m) = &cache.mask {
            d_states.iter_mut().zip(m).for_each(|(v, &k)| *v *= k);
        }
        let d_emb = self.encoder.backward(store, &cache.enc, &d_states, grads);
        let e = self.embedding_dim;
        debug_assert_eq!(d_emb.len(), cache.emb.len());
        let table = grads.buf_mut(self.embedding);
        for (t, &id) in cache.ids.iter().enumerate() {
            for (g, &v) in table[id * e..(id + 1) * e].iter_mut().zip(&d_emb[t * e..(t + 1) * e]) {
                *g += v;
            }
        }
    }
}

/// A trained (or freshly initialised) tagger with its vocabulary and labels.
#[derive(Clone, Debug)]
pub struct TaggerModel {
    pub config: TaggerConfig,
    pub vocab: Vocab,
    pub labels: LabelSpace,
    pub net: TaggerNet,
    pub params: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: TaggerConfig,
    vocab: Vocab,
    labels: LabelSpace,
}

impl TaggerModel {
    pub fn new(config: TaggerConfig, vocab: Vocab, labels: LabelSpace) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, &[stream::INIT]));
        let mut params = ParamStore::new();
        let net = TaggerNet::build(&mut params, &config, vocab.len(), labels.num_intents(), labels.num_tags(), &mut rng);
        Ok(TaggerModel {
            config,
            vocab,
            labels,
            net,
            params,
        })
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        self.vocab.encode(tokens)
    }

    /// Eval-mode logits for a tokenised utterance.
    pub fn logits(&self, tokens: &[String]) -> Result<SentenceLogits<f32>> {
        let ids = self.encode(tokens);
        Ok(self.net.forward(&self.params, &ids, Mode::Eval, 0)?.0)
    }

    pub fn forward(&self, tokens: &[String], mode: Mode, dropout_seed: u64) -> Result<SentenceLogits<f32>> {
        let ids = self.encode(tokens);
        Ok(self.net.forward(&self.params, &ids, mode, dropout_seed)?.0)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::to_value(ModelMeta {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            labels: self.labels.clone(),
        })?;
        Ok(Checkpoint {
            meta,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut meta: ModelMeta = serde_json::from_value(ck.meta.clone())?;
        meta.vocab.reindex();
        meta.labels.reindex();
        let mut model = TaggerModel::new(meta.config, meta.vocab, meta.labels)?;
        ck.restore_into(&mut model.params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        TaggerModel::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::build_vocab;
    use crate::corpus::tokenize;

    pub(crate) fn tiny_model(hidden: usize, intents: &[&str], slots: &[&str], words: &str) -> TaggerModel {
        let toks = tokenize(words);
        let vocab = build_vocab([toks.as_slice()], 1);
        let labels = LabelSpace::new(intents.iter().copied(), slots.iter().copied()).unwrap();
        let cfg = TaggerConfig {
            hidden_size: hidden,
            embedding_dim: 6,
            dropout: 0.3,
            ..Default::default()
        };
        TaggerModel::new(cfg, vocab, labels).unwrap()
    }

    #[test]
    fn logits_shapes_match_label_space() {
        let intents: Vec<String> = (0..11).map(|i| format!("intent{i}")).collect();
        let slots: Vec<String> = (0..7).map(|i| format!("slot{i}")).collect();
        let intents: Vec<&str> = intents.iter().map(String::as_str).collect();
        let slots: Vec<&str> = slots.iter().map(String::as_str).collect();
        let m = tiny_model(8, &intents, &slots, "what's the weather in sydney today");
        let toks = tokenize("What's the weather in Sydney today");
        let l = m.logits(&toks).unwrap();
        assert_eq!(l.intent.len(), 11);
        assert_eq!(l.num_tokens(), 6);
        assert_eq!(l.num_tags, 15);
    }

    #[test]
    fn eval_is_deterministic_and_train_is_seeded() {
        let m = tiny_model(5, &["a", "b"], &["x"], "one two three");
        let toks = tokenize("one two three four");
        assert_eq!(m.logits(&toks).unwrap(), m.logits(&toks).unwrap());
        let a = m.forward(&toks, Mode::Train, 11).unwrap();
        assert_eq!(a, m.forward(&toks, Mode::Train, 11).unwrap());
        assert_ne!(a, m.forward(&toks, Mode::Train, 12).unwrap());
    }

    #[test]
    fn empty_utterance_rejected() {
        let m = tiny_model(3, &["a"], &["x"], "a");
        assert!(matches!(m.logits(&[]), Err(Error::Precondition(_))));
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let m = tiny_model(4, &["a", "b"], &["x", "y"], "hello there world");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = TaggerModel::load(&path).unwrap();
        let toks = tokenize("hello world");
        assert_eq!(m.logits(&toks).unwrap(), back.logits(&toks).unwrap());
        assert_eq!(back.labels, m.labels);
    }

    #[test]
    fn config_validation() {
        assert!(TaggerConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
        assert!(TaggerConfig { hidden_size: 0, ..Default::default() }.validate().is_err());
        TaggerConfig::default().validate().unwrap();
    }
}
