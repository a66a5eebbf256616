//! Training loop and the batch objective.
//!
//! A batch holds clean items, a slice of the augmented set and, when
//! adversarial pairing is on, the paraphrases of the clean items (used only
//! by the pairing term). The objective is
//!
//! ```text
//! mean_clean(ce_intent + mean_t ce_slot)
//!   + (1 / n_aug) Σ_aug w_i (ce_intent + mean_t ce_slot)
//!   + clean pairing + adversarial pairing
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{exact_match, predict, TaggerConfig, TaggerModel, TaggerNet};
use crate::corpus::{build_vocab, spans_to_bio, Annotation, LabelSpace, LabeledExample, SlotSpan};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::pairing::{adversarial_pairs, clean_pairs, pair_loss, AdvGroup, PairSpec, PairingConfig, SentenceLogits};
use crate::seed::{self, stream};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{clip_global_norm, softmax_cross_entropy, Grads, Mode, OptimState, Optimizer, ParamStore, Scalar, Tensor};

/// Backward passes are accumulated in this many ordered chunks whatever the
/// execution mode, so sequential and parallel runs sum in the same order.
const GRAD_CHUNKS: usize = 4;

#[derive(Clone, Copy, Debug)]
pub struct TrainInputs<'a> {
    pub clean: &'a [LabeledExample],
    pub augmented: &'a [LabeledExample],
    /// `paraphrases[i]` are self-tagged paraphrases of `clean[i]`.
    pub paraphrases: Option<&'a [Vec<LabeledExample>]>,
    pub dev: &'a [LabeledExample],
    /// Defaults to the labels found in `clean`, `augmented` and `dev`.
    pub labels: Option<&'a LabelSpace>,
}

impl<'a> TrainInputs<'a> {
    pub fn new(clean: &'a [LabeledExample]) -> Self {
        TrainInputs {
            clean,
            augmented: &[],
            paraphrases: None,
            dev: &[],
            labels: None,
        }
    }

    fn all_examples(&self) -> impl Iterator<Item = &'a LabeledExample> {
        let paras = self.paraphrases.unwrap_or(&[]).iter().flatten();
        self.clean.iter().chain(self.augmented).chain(paras)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Target {
    pub intent: usize,
    pub tags: Vec<usize>,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Clean,
    Augmented,
    /// Contributes only through pairing terms.
    PairOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub ids: Vec<usize>,
    pub role: Role,
    pub target: Option<Target>,
    pub spans: Vec<SlotSpan>,
    pub dropout_seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    pub clean_pairs: Vec<PairSpec>,
    pub adv_pairs: Vec<PairSpec>,
}

impl Batch {
    fn count(&self, role: Role) -> usize {
        self.items.iter().filter(|i| i.role == role).count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub clean: f64,
    pub augmented: f64,
    pub clean_pairing: f64,
    pub adv_pairing: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.clean + self.augmented + self.clean_pairing + self.adv_pairing
    }

    fn add(&mut self, o: &LossParts) {
        self.clean += o.clean;
        self.augmented += o.augmented;
        self.clean_pairing += o.clean_pairing;
        self.adv_pairing += o.adv_pairing;
    }
}

/// Sentence loss `ce_intent + mean_t ce_slot` and its logit gradient.
fn sentence_loss<S: Scalar>(logits: &SentenceLogits<S>, target: &Target, scale: S) -> Result<(S, SentenceLogits<S>)> {
    let (li, gi) = softmax_cross_entropy(&logits.intent, target.intent)?;
    let n = logits.num_tokens();
    if n != target.tags.len() {
        return Err(Error::dim(&[n], &[target.tags.len()], "slot logits vs gold tags"));
    }
    let per_tok = S::lit(1.0 / n as f64);
    let mut slot_loss = S::zero();
    let mut grad = SentenceLogits::zeros_like(logits);
    grad.intent.iter_mut().zip(gi).for_each(|(g, v)| *g = v * scale);
    let k = logits.num_tags;
    for (t, &tag) in target.tags.iter().enumerate() {
        let (l, g) = softmax_cross_entropy(logits.token(t), tag)?;
        slot_loss += l;
        for (o, v) in grad.slots[t * k..(t + 1) * k].iter_mut().zip(g) {
            *o = v * per_tok * scale;
        }
    }
    Ok((li + slot_loss * per_tok, grad))
}

fn add_into<S: Scalar>(dst: &mut SentenceLogits<S>, src: &SentenceLogits<S>) {
    dst.intent.iter_mut().zip(&src.intent).for_each(|(a, &b)| *a += b);
    dst.slots.iter_mut().zip(&src.slots).for_each(|(a, &b)| *a += b);
}

/// Loss components and parameter gradients of one batch.
pub fn batch_objective<S: Scalar>(
    net: &TaggerNet,
    store: &ParamStore<S>,
    batch: &Batch,
    pairing: Option<&PairingConfig>,
    mode: Mode,
    exec: Execution,
) -> Result<(LossParts, Grads<S>)> {
    let forwards = exec.map(&batch.items, |it| net.forward(store, &it.ids, mode, it.dropout_seed));
    let forwards: Vec<_> = forwards.into_iter().collect::<Result<_>>()?;
    let n_clean = batch.count(Role::Clean);
    let n_aug = batch.count(Role::Augmented);

    let mut parts = LossParts::default();
    let mut d_logits: Vec<SentenceLogits<S>> = Vec::with_capacity(batch.items.len());
    for (it, (logits, _)) in batch.items.iter().zip(&forwards) {
        let (denom, slot) = match it.role {
            Role::Clean => (n_clean, &mut parts.clean),
            Role::Augmented => (n_aug, &mut parts.augmented),
            Role::PairOnly => {
                d_logits.push(SentenceLogits::zeros_like(logits));
                continue;
            }
        };
        let target = it
            .target
            .as_ref()
            .ok_or_else(|| Error::Invariant("labelled batch item without target".into()))?;
        let scale = target.weight / denom as f64;
        let (loss, grad) = sentence_loss(logits, target, S::lit(scale))?;
        *slot += loss.as_f64() * scale;
        d_logits.push(grad);
    }

    if let Some(cfg) = pairing {
        let logits: Vec<SentenceLogits<S>> = forwards.iter().map(|(l, _)| l.clone()).collect();
        for (pairs, lambda, slot) in [
            (&batch.clean_pairs, cfg.lambda_sf, &mut parts.clean_pairing),
            (&batch.adv_pairs, cfg.lambda_a, &mut parts.adv_pairing),
        ] {
            if lambda == 0.0 || pairs.is_empty() {
                continue;
            }
            let pl = pair_loss(&logits, pairs, lambda)?;
            *slot = pl.value.as_f64();
            for (d, g) in d_logits.iter_mut().zip(&pl.grads) {
                if let Some(g) = g {
                    add_into(d, g);
                }
            }
        }
    }

    let n = batch.items.len();
    let chunk = n.div_ceil(GRAD_CHUNKS).max(1);
    let partial = exec.map_range(GRAD_CHUNKS, |c| {
        let mut g = store.zero_grads();
        for i in (c * chunk).min(n)..((c + 1) * chunk).min(n) {
            net.backward(store, &forwards[i].1, &d_logits[i], &mut g);
        }
        g
    });
    let mut it = partial.into_iter();
    let mut grads = it.next().unwrap_or_else(|| store.zero_grads());
    for g in it {
        grads.add_assign(&g);
    }
    Ok((parts, grads))
}

/// An example after vocabulary and tag encoding.
#[derive(Clone, Debug)]
pub(crate) struct Encoded {
    ids: Vec<usize>,
    target: Target,
    annotation: Annotation,
}

fn encode(model: &TaggerModel, ex: &LabeledExample) -> Result<Encoded> {
    let intent = model
        .labels
        .intent_id(&ex.annotation.intent)
        .ok_or_else(|| Error::UnknownLabel {
            label: ex.annotation.intent.clone(),
            kind: "intent",
            line: 0,
        })?;
    let bio = spans_to_bio(&ex.annotation, ex.utterance.len())?;
    let tags = bio
        .iter()
        .map(|t| {
            model.labels.tag_id(t).ok_or_else(|| Error::UnknownLabel {
                label: t.to_string(),
                kind: "slot",
                line: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Encoded {
        ids: model.encode(&ex.utterance.tokens),
        target: Target {
            intent,
            tags,
            weight: ex.weight as f64,
        },
        annotation: ex.annotation.clone(),
    })
}

/// Everything needed to build batches for one run.
pub(crate) struct Plan {
    clean: Vec<Encoded>,
    augmented: Vec<Encoded>,
    paraphrases: Vec<Vec<Encoded>>,
    batch_size: usize,
    seed: u64,
}

impl Plan {
    fn num_batches(&self) -> usize {
        self.clean.len().div_ceil(self.batch_size)
    }

    fn order(&self, n: usize, epoch: usize, tag: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.seed, &[tag, epoch as u64]));
        idx.shuffle(&mut rng);
        idx
    }

    /// Batches of one epoch. The augmented set is spread evenly over the
    /// clean batches.
    fn epoch(&self, epoch: usize, pairing: Option<&PairingConfig>) -> Vec<Batch> {
        let nb = self.num_batches();
        let clean_order = self.order(self.clean.len(), epoch, stream::SHUFFLE_CLEAN);
        let aug_order = if self.augmented.is_empty() {
            Vec::new()
        } else {
            self.order(self.augmented.len(), epoch, stream::SHUFFLE_AUG)
        };
        let aug_bs = self.augmented.len().div_ceil(nb).max(1);
        let mut pair_rng = pairing.map(|p| ChaCha8Rng::seed_from_u64(seed::derive(p.seed, &[stream::PAIRS, epoch as u64])));
        (0..nb)
            .map(|b| {
                let mut batch = Batch::default();
                let dropout = |pos: usize| seed::derive(self.seed, &[stream::DROPOUT, epoch as u64, b as u64, pos as u64]);
                let item = |e: &Encoded, role: Role, pos: usize| BatchItem {
                    ids: e.ids.clone(),
                    role,
                    target: (role != Role::PairOnly).then(|| e.target.clone()),
                    spans: e.annotation.slots.clone(),
                    dropout_seed: dropout(pos),
                };
                let clean_idx = &clean_order[b * self.batch_size..((b + 1) * self.batch_size).min(clean_order.len())];
                for &i in clean_idx {
                    batch.items.push(item(&self.clean[i], Role::Clean, batch.items.len()));
                }
                let lo = (b * aug_bs).min(aug_order.len());
                let hi = ((b + 1) * aug_bs).min(aug_order.len());
                for &i in &aug_order[lo..hi] {
                    batch.items.push(item(&self.augmented[i], Role::Augmented, batch.items.len()));
                }
                let mut groups = Vec::new();
                if pairing.is_some_and(|p| p.lambda_a > 0.0) && !self.paraphrases.is_empty() {
                    for (pos, &i) in clean_idx.iter().enumerate() {
                        let paras = &self.paraphrases[i];
                        if paras.is_empty() {
                            continue;
                        }
                        let mut g = AdvGroup {
                            original: pos,
                            paraphrases: Vec::new(),
                        };
                        for p in paras {
                            g.paraphrases.push(batch.items.len());
                            batch.items.push(item(p, Role::PairOnly, batch.items.len()));
                        }
                        groups.push(g);
                    }
                }
                if let (Some(cfg), Some(rng)) = (pairing, pair_rng.as_mut()) {
                    if cfg.lambda_sf > 0.0 {
                        let anns: Vec<&Annotation> = clean_idx.iter().map(|&i| &self.clean[i].annotation).collect();
                        batch.clean_pairs = clean_pairs(&anns, cfg, rng);
                    }
                    if cfg.lambda_a > 0.0 {
                        let spans: Vec<Vec<SlotSpan>> = batch.items.iter().map(|i| i.spans.clone()).collect();
                        batch.adv_pairs = adversarial_pairs(&groups, &spans, cfg.include_para_para);
                    }
                }
                batch
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over batches of each loss component.
    pub loss: LossParts,
    pub total: f64,
    pub dev_exact_match: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub selected_epoch: Option<usize>,
}

impl History {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotMeta {
    config: TaggerConfig,
    pairing: Option<PairingConfig>,
    epoch: usize,
    step_count: u64,
    history: History,
    best_epoch: Option<usize>,
    best_score: f64,
    model: serde_json::Value,
}

/// Epoch-by-epoch trainer. [`train`] runs it to completion; callers that
/// want to checkpoint between epochs drive it directly.
pub struct Trainer<'a> {
    model: TaggerModel,
    plan: Plan,
    pairing: Option<PairingConfig>,
    optimizer: Optimizer,
    state: OptimState<f32>,
    dev: &'a [LabeledExample],
    epoch: usize,
    history: History,
    best: Option<(f64, usize, ParamStore<f32>)>,
    exec: Execution,
}

impl<'a> Trainer<'a> {
    pub fn new(inputs: TrainInputs<'a>, cfg: &TaggerConfig, pairing: Option<&PairingConfig>, exec: Execution) -> Result<Self> {
        cfg.validate()?;
        if let Some(p) = pairing {
            p.validate()?;
        }
        if inputs.clean.is_empty() {
            return Err(Error::NoTrainingData);
        }
        if let Some(paras) = inputs.paraphrases {
            if paras.len() != inputs.clean.len() {
                return Err(Error::dim(&[paras.len()], &[inputs.clean.len()], "paraphrase lists vs clean examples"));
            }
        } else if pairing.is_some_and(|p| p.lambda_a > 0.0) {
            return Err(Error::Precondition("adversarial pairing needs paraphrase links".into()));
        }
        let labels = match inputs.labels {
            Some(l) => l.clone(),
            None => {
                let mut all: Vec<LabeledExample> = inputs.clean.to_vec();
                all.extend_from_slice(inputs.augmented);
                all.extend_from_slice(inputs.dev);
                LabelSpace::from_examples(&all)?
            }
        };
        let vocab = build_vocab(inputs.all_examples().map(|e| e.utterance.tokens.as_slice()), cfg.min_count);
        let model = TaggerModel::new(cfg.clone(), vocab, labels)?;
        let enc = |xs: &[LabeledExample]| xs.iter().map(|e| encode(&model, e)).collect::<Result<Vec<_>>>();
        let plan = Plan {
            clean: enc(inputs.clean)?,
            augmented: enc(inputs.augmented)?,
            paraphrases: match inputs.paraphrases {
                Some(p) => p.iter().map(|v| enc(v)).collect::<Result<_>>()?,
                None => Vec::new(),
            },
            batch_size: cfg.batch_size,
            seed: cfg.seed,
        };
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay)?;
        let state = OptimState::new(&model.params);
        Ok(Trainer {
            model,
            plan,
            pairing: pairing.cloned(),
            optimizer,
            state,
            dev: inputs.dev,
            epoch: 0,
            history: History::default(),
            best: None,
            exec,
        })
    }

    pub fn model(&self) -> &TaggerModel {
        &self.model
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.model.config.epochs
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let e = self.epoch;
        let pairing = self.pairing.as_ref().filter(|p| p.lambda_sf > 0.0 || p.lambda_a > 0.0);
        let batches = self.plan.epoch(e, pairing);
        let mut sum = LossParts::default();
        let mut norm_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let (parts, mut grads) = batch_objective(&self.model.net, &self.model.params, batch, pairing, Mode::Train, self.exec)?;
            if !parts.total().is_finite() || !grads.is_finite() {
                return Err(Error::Training(format!("non-finite loss or gradient at epoch {}, batch {b}", e + 1)));
            }
            norm_sum += clip_global_norm(&mut grads, self.model.config.clip_norm);
            self.model.params.load_grads(grads)?;
            self.optimizer.step(&mut self.model.params, &mut self.state)?;
            sum.add(&parts);
        }
        let nb = batches.len().max(1) as f64;
        let loss = LossParts {
            clean: sum.clean / nb,
            augmented: sum.augmented / nb,
            clean_pairing: sum.clean_pairing / nb,
            adv_pairing: sum.adv_pairing / nb,
        };
        let dev_exact_match = if self.dev.is_empty() {
            None
        } else {
            Some(evaluate(&self.model, self.dev, self.exec)?)
        };
        let rec = EpochRecord {
            epoch: e + 1,
            loss,
            total: loss.total(),
            dev_exact_match,
            grad_norm: norm_sum / nb,
        };
        if self.model.config.select_on_dev {
            if let Some(score) = dev_exact_match {
                if self.best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                    self.best = Some((score, e + 1, self.model.params.clone()));
                }
            }
        }
        self.history.epochs.push(rec.clone());
        self.epoch += 1;
        Ok(rec)
    }

    /// Final model with dev-selected parameters, if any.
    pub fn finish(self) -> (TaggerModel, History) {
        let mut model = self.model;
        let mut history = self.history;
        match self.best {
            Some((_, epoch, params)) => {
                model.params = strip_grads(params);
                history.selected_epoch = Some(epoch);
            }
            None => {
                model.params = strip_grads(model.params);
                history.selected_epoch = Some(self.epoch);
            }
        }
        (model, history)
    }

    /// Full trainer state, enough to continue bit-identically.
    pub fn snapshot(&self) -> Result<Checkpoint> {
        let mut params = ParamStore::new();
        let names = self.model.params.names().to_vec();
        for (i, (name, t)) in self.model.params.iter().enumerate() {
            params.add(format!("param/{name}"), Tensor::new(t.shape(), t.data().to_vec())?);
            params.add(format!("adam_m/{name}"), Tensor::new(t.shape(), self.state.first_moment[i].clone())?);
            params.add(format!("adam_v/{name}"), Tensor::new(t.shape(), self.state.second_moment[i].clone())?);
        }
        if let Some((_, _, best)) = &self.best {
            for (name, t) in names.iter().zip(best.tensors()) {
                params.add(format!("best/{name}"), Tensor::new(t.shape(), t.data().to_vec())?);
            }
        }
        let meta = SnapshotMeta {
            config: self.model.config.clone(),
            pairing: self.pairing.clone(),
            epoch: self.epoch,
            step_count: self.state.step_count,
            history: self.history.clone(),
            best_epoch: self.best.as_ref().map(|b| b.1),
            best_score: self.best.as_ref().map_or(0.0, |b| b.0),
            model: self.model.to_checkpoint()?.meta,
        };
        Ok(Checkpoint {
            meta: serde_json::to_value(meta)?,
            params,
        })
    }

    /// Continues from a snapshot taken by a trainer built on the same inputs.
    pub fn restore(&mut self, snap: &Checkpoint) -> Result<()> {
        let meta: SnapshotMeta = serde_json::from_value(snap.meta.clone())?;
        if meta.config != self.model.config || meta.pairing != self.pairing {
            return Err(Error::Checkpoint("snapshot was taken with a different configuration".into()));
        }
        if meta.model != self.model.to_checkpoint()?.meta {
            return Err(Error::Checkpoint("snapshot vocabulary or labels differ from the training data".into()));
        }
        let lookup = |prefix: &str, name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let key = format!("{prefix}/{name}");
            let pos = snap
                .params
                .names()
                .iter()
                .position(|n| *n == key)
                .ok_or_else(|| Error::Checkpoint(format!("snapshot lacks `{key}`")))?;
            let t = &snap.params.tensors()[pos];
            if t.shape() != shape {
                return Err(Error::dim(t.shape(), shape, "snapshot tensor"));
            }
            Ok(t.data().to_vec())
        };
        let names = self.model.params.names().to_vec();
        let mut best = meta.best_epoch.map(|_| self.model.params.clone());
        for (i, name) in names.iter().enumerate() {
            let shape = self.model.params.tensors()[i].shape().to_vec();
            let p = lookup("param", name, &shape)?;
            self.model.params.tensors_mut()[i].data_mut().copy_from_slice(&p);
            self.state.first_moment[i] = lookup("adam_m", name, &shape)?;
            self.state.second_moment[i] = lookup("adam_v", name, &shape)?;
            if let Some(b) = best.as_mut() {
                let v = lookup("best", name, &shape)?;
                b.tensors_mut()[i].data_mut().copy_from_slice(&v);
            }
        }
        self.state.step_count = meta.step_count;
        self.epoch = meta.epoch;
        self.history = meta.history;
        self.best = match (meta.best_epoch, best) {
            (Some(e), Some(b)) => Some((meta.best_score, e, b)),
            _ => None,
        };
        Ok(())
    }
}

fn strip_grads(mut params: ParamStore<f32>) -> ParamStore<f32> {
    for t in params.tensors_mut() {
        t.zero_grad();
    }
    params
}

/// Exact match of a model over labelled examples.
pub fn evaluate(model: &TaggerModel, examples: &[LabeledExample], exec: Execution) -> Result<f64> {
    let preds = exec.map(examples, |e| predict(model, &e.utterance));
    let preds: Vec<_> = preds.into_iter().collect::<Result<_>>()?;
    let golds: Vec<Annotation> = examples.iter().map(|e| e.annotation.clone()).collect();
    exact_match(&preds, &golds)
}

/// Trains a tagger on clean data plus optional augmented data and pairing
/// terms.
pub fn train(inputs: TrainInputs<'_>, cfg: &TaggerConfig, pairing: Option<&PairingConfig>, exec: Execution) -> Result<(TaggerModel, History)> {
    let mut trainer = Trainer::new(inputs, cfg, pairing, exec)?;
    while !trainer.is_done() {
        let rec = trainer.run_epoch()?;
        log::debug!("epoch {} loss {:.4} dev {:?}", rec.epoch, rec.total, rec.dev_exact_match);
    }
    Ok(trainer.finish())
}
