//! Append-only event log behind the annotation workflow.
//!
//! The file starts with a `created` record holding the label space; every
//! later line is one state change. Opening a store replays the log. Leases
//! live only in memory.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{AdjudicationRecord, AnnotationRecord, CandidateRecord, Decision, Status};
use crate::corpus::{LabelSpace, LabeledExample, Origin};
use crate::error::{Error, Result};
use crate::paraphraser::Source;

pub const DEFAULT_LEASE_SECS: u64 = 30 * 60;

pub trait Clock: Send + Sync {
    /// Seconds since the Unix epoch.
    fn now(&self) -> u64;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
    }
}

/// Settable clock for tests.
#[derive(Debug, Default)]
pub struct ManualClock(pub AtomicU64);

impl ManualClock {
    pub fn new(t: u64) -> Self {
        ManualClock(AtomicU64::new(t))
    }

    pub fn set(&self, t: u64) {
        self.0.store(t, Ordering::SeqCst);
    }

    pub fn advance(&self, secs: u64) {
        self.0.fetch_add(secs, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

impl<C: Clock + ?Sized> Clock for Arc<C> {
    fn now(&self) -> u64 {
        (**self).now()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created { labels: LabelSpace, show_original: bool },
    CandidateCreated { candidate: Box<CandidateRecord> },
    AnnotationAdded { record: AnnotationRecord },
    Adjudicated { record: AdjudicationRecord },
    Exported { count: usize, timestamp: u64 },
}

#[derive(Clone, Debug)]
struct Entry {
    record: CandidateRecord,
    annotations: Vec<AnnotationRecord>,
    adjudication: Option<AdjudicationRecord>,
}

/// What an annotator sees: no predictions, no other decisions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateView {
    pub candidate_id: String,
    pub text: String,
    pub tokens: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub original_text: Option<String>,
    pub intents: Vec<String>,
    pub slot_labels: Vec<String>,
    pub lease_expires: u64,
}

/// What an adjudicator sees: the candidate and both conflicting decisions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjudicationView {
    pub candidate: CandidateView,
    pub annotations: Vec<AnnotationRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub by_status: BTreeMap<Status, usize>,
    pub by_source: BTreeMap<String, BTreeMap<Status, usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Lease {
    expires: u64,
}

pub struct AdvStore {
    path: Option<PathBuf>,
    labels: LabelSpace,
    show_original: bool,
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    /// (candidate index, user) → lease.
    leases: HashMap<(usize, String), Lease>,
    lease_secs: u64,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for AdvStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdvStore")
            .field("path", &self.path)
            .field("candidates", &self.entries.len())
            .finish()
    }
}

impl AdvStore {
    pub fn in_memory(labels: LabelSpace, show_original: bool) -> Self {
        AdvStore {
            path: None,
            labels,
            show_original,
            entries: Vec::new(),
            index: HashMap::new(),
            leases: HashMap::new(),
            lease_secs: DEFAULT_LEASE_SECS,
            clock: Arc::new(SystemClock),
        }
    }

    /// Starts a new log at `path`; fails if the file already exists.
    pub fn create(path: impl AsRef<Path>, labels: LabelSpace, show_original: bool) -> Result<Self> {
        let path = path.as_ref();
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(|e| Error::Conflict(format!("cannot create event log {}: {e}", path.display())))?;
        let ev = Event::Created {
            labels: labels.clone(),
            show_original,
        };
        writeln!(f, "{}", serde_json::to_string(&ev)?)?;
        f.sync_all()?;
        let mut s = AdvStore::in_memory(labels, show_original);
        s.path = Some(path.to_path_buf());
        Ok(s)
    }

    /// Replays an existing log.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::NotFound(format!("event log {}: {e}", path.display())))?;
        let mut store: Option<AdvStore> = None;
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { line: i + 1, message };
            let ev: Event = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            match (&mut store, ev) {
                (None, Event::Created { mut labels, show_original }) => {
                    labels.reindex();
                    store = Some(AdvStore::in_memory(labels, show_original));
                }
                (None, _) => return Err(parse_err("event log must start with a `created` record".into())),
                (Some(_), Event::Created { .. }) => return Err(parse_err("duplicate `created` record".into())),
                (Some(s), ev) => s.apply(ev).map_err(|e| parse_err(format!("replay failed: {e}")))?,
            }
        }
        let mut s = store.ok_or_else(|| Error::Parse {
            line: 0,
            message: "empty event log".into(),
        })?;
        s.path = Some(path.to_path_buf());
        Ok(s)
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_lease_secs(mut self, secs: u64) -> Self {
        self.lease_secs = secs;
        self
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn labels(&self) -> &LabelSpace {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn candidate(&self, id: &str) -> Option<&CandidateRecord> {
        self.index.get(id).map(|&i| &self.entries[i].record)
    }

    pub fn candidates(&self) -> impl Iterator<Item = &CandidateRecord> {
        self.entries.iter().map(|e| &e.record)
    }

    pub fn status(&self, id: &str) -> Result<Status> {
        self.candidate(id)
            .map(|c| c.status)
            .ok_or_else(|| Error::NotFound(format!("candidate `{id}`")))
    }

    /// Annotations and adjudication behind a candidate.
    pub fn audit(&self, id: &str) -> Result<(Vec<AnnotationRecord>, Option<AdjudicationRecord>)> {
        let &i = self.index.get(id).ok_or_else(|| Error::NotFound(format!("candidate `{id}`")))?;
        Ok((self.entries[i].annotations.clone(), self.entries[i].adjudication.clone()))
    }

    fn persist(&self, ev: &Event) -> Result<()> {
        if let Some(p) = &self.path {
            let mut f = OpenOptions::new().append(true).open(p)?;
            writeln!(f, "{}", serde_json::to_string(ev)?)?;
            f.sync_data()?;
        }
        Ok(())
    }

    /// Validates, applies and logs one event.
    fn commit(&mut self, ev: Event) -> Result<()> {
        self.check(&ev)?;
        self.persist(&ev)?;
        self.apply(ev)
    }

    fn entry(&self, id: &str) -> Result<usize> {
        self.index.get(id).copied().ok_or_else(|| Error::NotFound(format!("candidate `{id}`")))
    }

    fn check_decision(&self, d: &Decision, n_tokens: usize) -> Result<()> {
        if let Decision::Valid { annotation } = d {
            if self.labels.intent_id(&annotation.intent).is_none() {
                return Err(Error::Validation {
                    field: "intent".into(),
                    message: format!("unknown intent `{}`", annotation.intent),
                });
            }
            if let Some(s) = annotation.slots.iter().find(|s| self.labels.slot_id(&s.label).is_none()) {
                return Err(Error::Validation {
                    field: "slots".into(),
                    message: format!("unknown slot label `{}`", s.label),
                });
            }
            annotation.validate(n_tokens).map_err(|e| Error::Validation {
                field: "slots".into(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    fn check(&self, ev: &Event) -> Result<()> {
        match ev {
            Event::Created { .. } => Err(Error::State("store already created".into())),
            Event::CandidateCreated { candidate } => {
                if self.index.contains_key(&candidate.candidate_id) {
                    return Err(Error::Conflict(format!("candidate `{}` already exists", candidate.candidate_id)));
                }
                if candidate.status != Status::Pending {
                    return Err(Error::State("new candidates must be pending".into()));
                }
                Ok(())
            }
            Event::AnnotationAdded { record } => {
                let e = &self.entries[self.entry(&record.candidate_id)?];
                if e.annotations.iter().any(|a| a.annotator_id == record.annotator_id) {
                    return Err(Error::Conflict(format!(
                        "annotator `{}` already annotated `{}`",
                        record.annotator_id, record.candidate_id
                    )));
                }
                if !matches!(e.record.status, Status::Pending | Status::Annotated) {
                    return Err(Error::State(format!(
                        "candidate `{}` is {:?} and takes no more annotations",
                        record.candidate_id, e.record.status
                    )));
                }
                self.check_decision(&record.decision, e.record.paraphrase.len())
            }
            Event::Adjudicated { record } => {
                let e = &self.entries[self.entry(&record.candidate_id)?];
                if e.record.status != Status::Adjudication {
                    return Err(Error::State(format!(
                        "candidate `{}` is {:?}, not awaiting adjudication",
                        record.candidate_id, e.record.status
                    )));
                }
                if e.annotations.iter().any(|a| a.annotator_id == record.adjudicator_id) {
                    return Err(Error::Conflict(format!(
                        "`{}` annotated `{}` and cannot adjudicate it",
                        record.adjudicator_id, record.candidate_id
                    )));
                }
                self.check_decision(&record.decision, e.record.paraphrase.len())
            }
            Event::Exported { .. } => Ok(()),
        }
    }

    fn apply(&mut self, ev: Event) -> Result<()> {
        match ev {
            Event::Created { .. } => return Err(Error::State("store already created".into())),
            Event::CandidateCreated { candidate } => {
                if self.index.contains_key(&candidate.candidate_id) {
                    return Err(Error::Conflict(format!("candidate `{}` already exists", candidate.candidate_id)));
                }
                self.index.insert(candidate.candidate_id.clone(), self.entries.len());
                self.entries.push(Entry {
                    record: *candidate,
                    annotations: Vec::new(),
                    adjudication: None,
                });
            }
            Event::AnnotationAdded { record } => {
                let i = self.entry(&record.candidate_id)?;
                self.leases.remove(&(i, record.annotator_id.clone()));
                let e = &mut self.entries[i];
                e.annotations.push(record);
                e.record.status = match e.annotations.as_slice() {
                    [_] => Status::Annotated,
                    [a, b] if a.decision.agrees_with(&b.decision) => Status::Final,
                    [_, _] => Status::Adjudication,
                    _ => return Err(Error::State(format!("candidate `{}` has too many annotations", e.record.candidate_id))),
                };
            }
            Event::Adjudicated { record } => {
                let i = self.entry(&record.candidate_id)?;
                self.leases.remove(&(i, record.adjudicator_id.clone()));
                let e = &mut self.entries[i];
                e.record.status = match record.decision {
                    Decision::Valid { .. } => Status::Final,
                    Decision::Meaningless | Decision::Ambiguous => Status::Rejected,
                };
                e.adjudication = Some(record);
            }
            Event::Exported { .. } => {}
        }
        Ok(())
    }

    pub fn add_candidates(&mut self, candidates: Vec<CandidateRecord>) -> Result<usize> {
        let n = candidates.len();
        for c in candidates {
            self.commit(Event::CandidateCreated { candidate: Box::new(c) })?;
        }
        Ok(n)
    }

    /// Records one annotator's decision and returns the new status.
    pub fn record_annotation(&mut self, rec: AnnotationRecord) -> Result<Status> {
        let id = rec.candidate_id.clone();
        self.commit(Event::AnnotationAdded { record: rec })?;
        self.status(&id)
    }

    /// Applies a third annotator's decision to a disputed candidate.
    pub fn resolve(&mut self, rec: AdjudicationRecord) -> Result<Status> {
        let id = rec.candidate_id.clone();
        self.commit(Event::Adjudicated { record: rec })?;
        self.status(&id)
    }

    /// The final valid decision of a candidate, if any.
    fn final_annotation(e: &Entry) -> Option<&crate::corpus::Annotation> {
        if e.record.status != Status::Final {
            return None;
        }
        let decision = match &e.adjudication {
            Some(adj) => &adj.decision,
            None => &e.annotations.first()?.decision,
        };
        match decision {
            Decision::Valid { annotation } => Some(annotation),
            _ => None,
        }
    }

    /// Final valid candidates as adversarial examples carrying the human
    /// annotation, in candidate order.
    pub fn export(&self) -> Result<Vec<(LabeledExample, Source)>> {
        let mut out = Vec::new();
        for e in &self.entries {
            if let Some(ann) = Self::final_annotation(e) {
                let ex = LabeledExample::new(e.record.paraphrase.clone(), ann.clone(), Origin::Adversarial, 1.0)?;
                out.push((ex, e.record.source.clone()));
            }
        }
        Ok(out)
    }

    /// [`AdvStore::export`] plus an `exported` entry in the log.
    pub fn export_logged(&mut self) -> Result<Vec<(LabeledExample, Source)>> {
        let out = self.export()?;
        let ev = Event::Exported {
            count: out.len(),
            timestamp: self.now(),
        };
        self.commit(ev)?;
        Ok(out)
    }

    pub fn progress(&self) -> Progress {
        let mut p = Progress {
            total: self.entries.len(),
            ..Default::default()
        };
        for e in &self.entries {
            *p.by_status.entry(e.record.status).or_default() += 1;
            *p.by_source
                .entry(e.record.source.to_string())
                .or_default()
                .entry(e.record.status)
                .or_default() += 1;
        }
        p
    }

    fn view(&self, i: usize, expires: u64) -> CandidateView {
        let r = &self.entries[i].record;
        CandidateView {
            candidate_id: r.candidate_id.clone(),
            text: r.paraphrase.text.clone(),
            tokens: r.paraphrase.tokens.clone(),
            original_text: self.show_original.then(|| r.original.utterance.text.clone()),
            intents: self.labels.intents().to_vec(),
            slot_labels: self.labels.slot_labels().to_vec(),
            lease_expires: expires,
        }
    }

    fn live_leases(&self, i: usize, now: u64) -> impl Iterator<Item = &String> {
        self.leases
            .iter()
            .filter(move |((c, _), l)| *c == i && l.expires > now)
            .map(|((_, u), _)| u)
    }

    fn drop_expired(&mut self, now: u64) {
        self.leases.retain(|_, l| l.expires > now);
    }

    /// Hands `annotator` a candidate that still needs an annotation from
    /// someone new, leasing one of its open annotation slots. Repeated calls
    /// return the same candidate while the lease is live.
    pub fn next_candidate(&mut self, annotator: &str) -> Option<CandidateView> {
        let now = self.now();
        self.drop_expired(now);
        if let Some((&(i, _), l)) = self.leases.iter().find(|((i, u), _)| u == annotator && self.entries[*i].record.status != Status::Adjudication) {
            let expires = l.expires;
            if matches!(self.entries[i].record.status, Status::Pending | Status::Annotated) {
                return Some(self.view(i, expires));
            }
        }
        let pick = self.entries.iter().enumerate().position(|(i, e)| {
            matches!(e.record.status, Status::Pending | Status::Annotated)
                && !e.annotations.iter().any(|a| a.annotator_id == annotator)
                && e.annotations.len() + self.live_leases(i, now).count() < 2
        })?;
        let expires = now + self.lease_secs;
        self.leases.insert((pick, annotator.to_string()), Lease { expires });
        Some(self.view(pick, expires))
    }

    /// Next disputed candidate for an adjudicator who did not annotate it.
    pub fn next_adjudication(&mut self, adjudicator: &str) -> Option<AdjudicationView> {
        let now = self.now();
        self.drop_expired(now);
        let held = self
            .leases
            .keys()
            .find(|(i, u)| u == adjudicator && self.entries[*i].record.status == Status::Adjudication)
            .map(|(i, _)| *i);
        let pick = match held {
            Some(i) => i,
            None => {
                let i = self.entries.iter().enumerate().position(|(i, e)| {
                    e.record.status == Status::Adjudication
                        && !e.annotations.iter().any(|a| a.annotator_id == adjudicator)
                        && self.live_leases(i, now).next().is_none()
                })?;
                self.leases.insert((i, adjudicator.to_string()), Lease { expires: now + self.lease_secs });
                i
            }
        };
        let expires = self.leases[&(pick, adjudicator.to_string())].expires;
        Some(AdjudicationView {
            candidate: self.view(pick, expires),
            annotations: self.entries[pick].annotations.clone(),
        })
    }
}
