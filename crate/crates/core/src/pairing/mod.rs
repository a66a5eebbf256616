//! Logit-pairing losses.
//!
//! Clean pairing matches the intent logits and aligned slot-entity logits of
//! sentences sharing the same annotation labels within a batch. Adversarial
//! pairing does the same between each original and its paraphrases and,
//! optionally, between paraphrases of the same original. Both are normalised
//! by the total number of pairs `P` and scaled by their own λ.
//!
//! A slot entity's logit vector is the mean of the per-token logits over the
//! entity's tokens.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Annotation, SlotSpan};
use crate::error::{Error, Result};
use crate::tensor::{mse, mse_backward, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairingConfig {
    pub lambda_sf: f64,
    pub lambda_a: f64,
    pub pair_cap: usize,
    pub include_para_para: bool,
    pub seed: u64,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig {
            lambda_sf: 0.0,
            lambda_a: 0.01,
            pair_cap: 10,
            include_para_para: true,
            seed: 0,
        }
    }
}

impl PairingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_sf.is_finite() && self.lambda_sf >= 0.0 && self.lambda_a.is_finite() && self.lambda_a >= 0.0) {
            return Err(Error::Precondition("pairing weights must be finite and ≥ 0".into()));
        }
        if self.pair_cap == 0 {
            return Err(Error::Precondition("pair_cap must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Intent logits plus row-major `T × num_tags` slot logits of one sentence.
/// The same shape is used for gradients with respect to those logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceLogits<S = f32> {
    pub intent: Vec<S>,
    pub slots: Vec<S>,
    pub num_tags: usize,
}

impl<S: Scalar> SentenceLogits<S> {
    pub fn zeros_like(other: &SentenceLogits<S>) -> Self {
        SentenceLogits {
            intent: vec![S::zero(); other.intent.len()],
            slots: vec![S::zero(); other.slots.len()],
            num_tags: other.num_tags,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.slots.len() / self.num_tags.max(1)
    }

    pub fn token(&self, t: usize) -> &[S] {
        &self.slots[t * self.num_tags..(t + 1) * self.num_tags]
    }

    /// Mean of the token logit vectors inside `span`.
    pub fn entity(&self, span: &SlotSpan) -> Vec<S> {
        let mut out = vec![S::zero(); self.num_tags];
        for t in span.start..=span.end {
            for (o, &v) in out.iter_mut().zip(self.token(t)) {
                *o += v;
            }
        }
        let n = S::lit(span.len() as f64);
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    fn add_entity_grad(&mut self, span: &SlotSpan, g: &[S]) {
        let n = S::lit(span.len() as f64);
        let k = self.num_tags;
        for t in span.start..=span.end {
            for (o, &v) in self.slots[t * k..(t + 1) * k].iter_mut().zip(g) {
                *o += v / n;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairGroup {
    pub key: (String, Vec<String>),
    pub members: Vec<usize>,
}

/// Partitions batch indices by (intent, multiset of slot labels). Groups are
/// ordered by first appearance.
pub fn group_by_annotation<'a, I>(annotations: I) -> Vec<PairGroup>
where
    I: IntoIterator<Item = &'a Annotation>,
{
    let mut order: Vec<PairGroup> = Vec::new();
    let mut lookup: HashMap<(String, Vec<String>), usize> = HashMap::new();
    for (i, ann) in annotations.into_iter().enumerate() {
        let key = ann.label_key();
        match lookup.get(&key) {
            Some(&g) => order[g].members.push(i),
            None => {
                lookup.insert(key.clone(), order.len());
                order.push(PairGroup { key, members: vec![i] });
            }
        }
    }
    order
}

/// All unordered member pairs when there are at most `cap`, otherwise a
/// uniform sample of `cap` of them. Output is sorted.
pub fn sample_pairs<R: Rng + ?Sized>(group: &PairGroup, cap: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let m = &group.members;
    let mut all = Vec::new();
    for a in 0..m.len() {
        for b in a + 1..m.len() {
            all.push((m[a], m[b]));
        }
    }
    if all.len() <= cap {
        return all;
    }
    let mut picked: Vec<(usize, usize)> = index::sample(rng, all.len(), cap).into_iter().map(|i| all[i]).collect();
    picked.sort_unstable();
    picked
}

/// `(original entity index, paraphrase entity index, label)` triples.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotAlignment {
    pub pairs: Vec<(usize, usize, String)>,
}

/// For each label, matches the i-th occurrence on the left with the i-th on
/// the right, scanning left to right. Unmatched entities are dropped.
pub fn align_slots(left: &[SlotSpan], right: &[SlotSpan]) -> SlotAlignment {
    let mut right_by_label: HashMap<&str, Vec<usize>> = HashMap::new();
    let mut order: Vec<usize> = (0..right.len()).collect();
    order.sort_by_key(|&j| right[j].start);
    for j in order {
        right_by_label.entry(right[j].label.as_str()).or_default().push(j);
    }
    let mut used: HashMap<&str, usize> = HashMap::new();
    let mut left_order: Vec<usize> = (0..left.len()).collect();
    left_order.sort_by_key(|&i| left[i].start);
    let mut pairs = Vec::new();
    for i in left_order {
        let label = left[i].label.as_str();
        let k = used.entry(label).or_default();
        if let Some(&j) = right_by_label.get(label).and_then(|v| v.get(*k)) {
            pairs.push((i, j, label.to_string()));
            *k += 1;
        }
    }
    SlotAlignment { pairs }
}

/// One pair of sentences in a batch and the entity spans to match.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSpec {
    pub left: usize,
    pub right: usize,
    pub entities: Vec<(SlotSpan, SlotSpan)>,
}

impl PairSpec {
    pub fn aligned(left: usize, left_spans: &[SlotSpan], right: usize, right_spans: &[SlotSpan]) -> Self {
        let entities = align_slots(left_spans, right_spans)
            .pairs
            .into_iter()
            .map(|(i, j, _)| (left_spans[i].clone(), right_spans[j].clone()))
            .collect();
        PairSpec { left, right, entities }
    }
}

/// Result of a pairing loss: value, pair count and gradients with respect to
/// each sentence's logits (`None` for sentences not in any pair).
#[derive(Clone, Debug)]
pub struct PairLoss<S> {
    pub value: S,
    pub pairs: usize,
    pub grads: Vec<Option<SentenceLogits<S>>>,
}

/// `(λ / P) Σ_pairs [ mse(intent) + Σ_entities mse(entity) ]`.
pub fn pair_loss<S: Scalar>(logits: &[SentenceLogits<S>], pairs: &[PairSpec], lambda: f64) -> Result<PairLoss<S>> {
    let mut grads: Vec<Option<SentenceLogits<S>>> = vec![None; logits.len()];
    if pairs.is_empty() || lambda == 0.0 {
        return Ok(PairLoss {
            value: S::zero(),
            pairs: pairs.len(),
            grads,
        });
    }
    let scale = S::lit(lambda / pairs.len() as f64);
    let mut total = S::zero();
    for p in pairs {
        let (a, b) = (&logits[p.left], &logits[p.right]);
        let mut ga = grads[p.left].take().unwrap_or_else(|| SentenceLogits::zeros_like(a));
        let mut gb = grads[p.right].take().unwrap_or_else(|| SentenceLogits::zeros_like(b));
        let mut term = mse(&a.intent, &b.intent)?;
        mse_backward(&a.intent, &b.intent, scale, &mut ga.intent, &mut gb.intent);
        for (sa, sb) in &p.entities {
            if sa.end >= a.num_tokens() || sb.end >= b.num_tokens() {
                return Err(Error::Invariant(format!("entity span {sa} / {sb} outside sentence")));
            }
            let ea = a.entity(sa);
            let eb = b.entity(sb);
            term += mse(&ea, &eb)?;
            let mut da = vec![S::zero(); ea.len()];
            let mut db = vec![S::zero(); eb.len()];
            mse_backward(&ea, &eb, scale, &mut da, &mut db);
            ga.add_entity_grad(sa, &da);
            gb.add_entity_grad(sb, &db);
        }
        total += term;
        // left and right may coincide only for degenerate input; merge safely
        if p.left == p.right {
            for (x, y) in ga.intent.iter_mut().zip(&gb.intent) {
                *x += *y;
            }
            for (x, y) in ga.slots.iter_mut().zip(&gb.slots) {
                *x += *y;
            }
            grads[p.left] = Some(ga);
        } else {
            grads[p.left] = Some(ga);
            grads[p.right] = Some(gb);
        }
    }
    Ok(PairLoss {
        value: total * scale,
        pairs: pairs.len(),
        grads,
    })
}

/// Pairs for clean logit pairing: group by annotation labels, sample up to
/// `cfg.pair_cap` pairs per group, align gold entities left to right.
pub fn clean_pairs<R: Rng + ?Sized>(annotations: &[&Annotation], cfg: &PairingConfig, rng: &mut R) -> Vec<PairSpec> {
    let groups = group_by_annotation(annotations.iter().copied());
    let mut out = Vec::new();
    for g in &groups {
        for (a, b) in sample_pairs(g, cfg.pair_cap, rng) {
            out.push(PairSpec::aligned(a, &annotations[a].slots, b, &annotations[b].slots));
        }
    }
    out
}

/// An original sentence and its paraphrases, as indices into the batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdvGroup {
    pub original: usize,
    pub paraphrases: Vec<usize>,
}

/// Original↔paraphrase pairs, plus paraphrase↔paraphrase pairs when enabled.
/// `spans[i]` are the slot entities of batch item `i` (gold for originals,
/// self-trained for paraphrases).
pub fn adversarial_pairs(groups: &[AdvGroup], spans: &[Vec<SlotSpan>], include_para_para: bool) -> Vec<PairSpec> {
    let mut out = Vec::new();
    for g in groups {
        for &p in &g.paraphrases {
            out.push(PairSpec::aligned(g.original, &spans[g.original], p, &spans[p]));
        }
        if include_para_para {
            for a in 0..g.paraphrases.len() {
                for b in a + 1..g.paraphrases.len() {
                    let (pa, pb) = (g.paraphrases[a], g.paraphrases[b]);
                    out.push(PairSpec::aligned(pa, &spans[pa], pb, &spans[pb]));
                }
            }
        }
    }
    out
}

/// Clean logit-pairing loss over a batch.
pub fn clean_pair_loss<S: Scalar, R: Rng + ?Sized>(
    logits: &[SentenceLogits<S>],
    annotations: &[&Annotation],
    cfg: &PairingConfig,
    rng: &mut R,
) -> Result<PairLoss<S>> {
    if logits.len() != annotations.len() {
        return Err(Error::dim(&[logits.len()], &[annotations.len()], "logits vs annotations"));
    }
    let pairs = clean_pairs(annotations, cfg, rng);
    pair_loss(logits, &pairs, cfg.lambda_sf)
}

/// Adversarial logit-pairing loss over a batch.
pub fn adv_pair_loss<S: Scalar>(
    logits: &[SentenceLogits<S>],
    spans: &[Vec<SlotSpan>],
    groups: &[AdvGroup],
    cfg: &PairingConfig,
) -> Result<PairLoss<S>> {
    if logits.len() != spans.len() {
        return Err(Error::dim(&[logits.len()], &[spans.len()], "logits vs spans"));
    }
    let pairs = adversarial_pairs(groups, spans, cfg.include_para_para);
    pair_loss(logits, &pairs, cfg.lambda_a)
}
