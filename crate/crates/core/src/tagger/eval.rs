use serde::{Deserialize, Serialize};

use super::TaggerModel;
use crate::corpus::{bio_to_spans, repair_bio, Annotation, LabeledExample, SlotSpan, Tag, TagSequence, Utterance};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub intent: String,
    pub intent_logits: Vec<f32>,
    pub slot_tags: TagSequence,
    /// `T × num_tags`, row-major.
    pub slot_logits: Vec<f32>,
    pub slots: Vec<SlotSpan>,
}

impl Prediction {
    pub fn annotation(&self) -> Annotation {
        Annotation::new(self.intent.clone(), self.slots.clone())
    }
}

/// Index of the maximum; ties go to the lowest index.
fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn decode_tags(model: &TaggerModel, ids: impl Iterator<Item = usize>) -> TagSequence {
    let raw: TagSequence = ids.map(|i| model.labels.tag(i).unwrap_or(Tag::O)).collect();
    repair_bio(&raw)
}

pub fn predict(model: &TaggerModel, utterance: &Utterance) -> Result<Prediction> {
    let logits = model.logits(&utterance.tokens)?;
    let intent_id = argmax(&logits.intent);
    let tags = decode_tags(model, (0..logits.num_tokens()).map(|t| argmax(logits.token(t))));
    let slots = bio_to_spans(&tags);
    Ok(Prediction {
        intent: model.labels.intents()[intent_id].clone(),
        intent_logits: logits.intent,
        slot_tags: tags,
        slot_logits: logits.slots,
        slots,
    })
}

fn sorted(spans: &[SlotSpan]) -> Vec<SlotSpan> {
    let mut v = spans.to_vec();
    v.sort();
    v
}

pub fn spans_match(a: &[SlotSpan], b: &[SlotSpan]) -> bool {
    sorted(a) == sorted(b)
}

/// Fraction of sentences whose intent and full slot-span set are correct.
pub fn exact_match(preds: &[Prediction], golds: &[Annotation]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::dim(&[preds.len()], &[golds.len()], "predictions vs gold annotations"));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.intent == g.intent && spans_match(&p.slots, &g.slots))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Majority vote; ties broken by the larger summed logit, then lowest index.
fn vote(choices: &[usize], summed: &[f32]) -> usize {
    let mut counts = vec![0usize; summed.len()];
    for &c in choices {
        counts[c] += 1;
    }
    let mut best = 0;
    for i in 1..counts.len() {
        if counts[i] > counts[best] || (counts[i] == counts[best] && summed[i] > summed[best]) {
            best = i;
        }
    }
    best
}

pub fn ensemble_predict(models: &[&TaggerModel], utterance: &Utterance) -> Result<Prediction> {
    let first = *models
        .first()
        .ok_or_else(|| Error::Precondition("ensemble needs at least one model".into()))?;
    if models.iter().any(|m| m.labels != first.labels) {
        return Err(Error::Precondition("ensemble members must share a label space".into()));
    }
    let all: Vec<_> = models.iter().map(|m| m.logits(&utterance.tokens)).collect::<Result<_>>()?;
    let n_int = first.labels.num_intents();
    let k = first.labels.num_tags();
    let steps = utterance.len();

    let mut intent_sum = vec![0f32; n_int];
    let mut slot_sum = vec![0f32; steps * k];
    for l in &all {
        intent_sum.iter_mut().zip(&l.intent).for_each(|(s, &v)| *s += v);
        slot_sum.iter_mut().zip(&l.slots).for_each(|(s, &v)| *s += v);
    }
    let intent_votes: Vec<usize> = all.iter().map(|l| argmax(&l.intent)).collect();
    let intent_id = vote(&intent_votes, &intent_sum);
    let tag_ids = (0..steps).map(|t| {
        let votes: Vec<usize> = all.iter().map(|l| argmax(l.token(t))).collect();
        vote(&votes, &slot_sum[t * k..(t + 1) * k])
    });
    let tags = decode_tags(first, tag_ids);
    let slots = bio_to_spans(&tags);
    let n = models.len() as f32;
    Ok(Prediction {
        intent: first.labels.intents()[intent_id].clone(),
        intent_logits: intent_sum.into_iter().map(|v| v / n).collect(),
        slot_tags: tags,
        slot_logits: slot_sum.into_iter().map(|v| v / n).collect(),
        slots,
    })
}

/// Labels a paraphrase: intent copied from the original's gold label, slots
/// from the model's own prediction on the paraphrase.
pub fn self_train_tag(model: &TaggerModel, paraphrase: &Utterance, original: &LabeledExample) -> Result<Annotation> {
    let pred = predict(model, paraphrase)?;
    Ok(Annotation::new(original.annotation.intent.clone(), pred.slots))
}
