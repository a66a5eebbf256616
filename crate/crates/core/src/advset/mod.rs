//! Adversarial test-set construction: flip-filtered paraphrase candidates,
//! double annotation with adjudication, and export of the validated set.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::dataset::format_record;
use crate::corpus::{Annotation, LabeledExample, Utterance};
use crate::error::Result;
use crate::exec::Execution;
use crate::paraphraser::{ParaphraseSet, Source};
use crate::tagger::{predict, Prediction, TaggerModel};

mod store;

pub use store::{AdjudicationView, AdvStore, CandidateView, Clock, Event, ManualClock, Progress, SystemClock, DEFAULT_LEASE_SECS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Annotated,
    Adjudication,
    Final,
    Rejected,
}

impl Status {
    pub const ALL: [Status; 5] = [Status::Pending, Status::Annotated, Status::Adjudication, Status::Final, Status::Rejected];

    /// Edges of the status DAG.
    pub fn can_move_to(self, next: Status) -> bool {
        matches!(
            (self, next),
            (Status::Pending, Status::Annotated)
                | (Status::Annotated, Status::Final)
                | (Status::Annotated, Status::Adjudication)
                | (Status::Adjudication, Status::Final)
                | (Status::Adjudication, Status::Rejected)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decision {
    Valid { annotation: Annotation },
    Meaningless,
    Ambiguous,
}

impl Decision {
    /// Same class and, for valid decisions, identical intent and span set.
    pub fn agrees_with(&self, other: &Decision) -> bool {
        match (self, other) {
            (Decision::Valid { annotation: a }, Decision::Valid { annotation: b }) => {
                let mut sa = a.slots.clone();
                let mut sb = b.slots.clone();
                sa.sort();
                sb.sort();
                a.intent == b.intent && sa == sb
            }
            (Decision::Meaningless, Decision::Meaningless) | (Decision::Ambiguous, Decision::Ambiguous) => true,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub candidate_id: String,
    pub original: LabeledExample,
    pub paraphrase: Utterance,
    pub source: Source,
    pub original_pred: Prediction,
    pub paraphrase_pred: Prediction,
    pub status: Status,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub candidate_id: String,
    pub annotator_id: String,
    pub decision: Decision,
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjudicationRecord {
    pub candidate_id: String,
    pub adjudicator_id: String,
    pub decision: Decision,
    pub timestamp: u64,
}

/// Keeps the beams whose predicted intent differs from the prediction on
/// the original. Sets naming an unknown original are skipped.
pub fn build_candidates(model: &TaggerModel, originals: &[LabeledExample], sets: &[ParaphraseSet], exec: Execution) -> Result<Vec<CandidateRecord>> {
    let by_id: HashMap<&str, &LabeledExample> = originals.iter().map(|e| (e.utterance.id.as_str(), e)).collect();
    let mut jobs: Vec<(&LabeledExample, &ParaphraseSet, usize)> = Vec::new();
    for set in sets {
        let Some(orig) = by_id.get(set.original_id.as_str()) else {
            log::warn!("paraphrase set for unknown original `{}` skipped", set.original_id);
            continue;
        };
        for b in 0..set.beams.len() {
            jobs.push((orig, set, b));
        }
    }
    let results = exec.map(&jobs, |&(orig, set, b)| -> Result<Option<CandidateRecord>> {
        let id = format!("{}#{}#{b}", set.original_id, set.source);
        let Ok(para) = Utterance::new(id.clone(), set.beams[b].text.clone()) else {
            return Ok(None);
        };
        let original_pred = predict(model, &orig.utterance)?;
        let paraphrase_pred = predict(model, &para)?;
        if paraphrase_pred.intent == original_pred.intent {
            return Ok(None);
        }
        Ok(Some(CandidateRecord {
            candidate_id: id,
            original: orig.clone(),
            paraphrase: para,
            source: set.source.clone(),
            original_pred,
            paraphrase_pred,
            status: Status::Pending,
        }))
    });
    let mut out = Vec::new();
    for r in results {
        if let Some(c) = r? {
            out.push(c);
        }
    }
    Ok(out)
}

/// Writes exported examples in the canonical dataset format with a source
/// column.
pub fn write_export<W: Write>(mut w: W, items: &[(LabeledExample, Source)]) -> Result<()> {
    for (ex, src) in items {
        writeln!(w, "{}", format_record(ex, Some(&src.to_string())))?;
    }
    Ok(())
}

pub fn group_by_source(items: &[(LabeledExample, Source)]) -> BTreeMap<String, Vec<LabeledExample>> {
    let mut out: BTreeMap<String, Vec<LabeledExample>> = BTreeMap::new();
    for (ex, src) in items {
        out.entry(src.to_string()).or_default().push(ex.clone());
    }
    out
}
