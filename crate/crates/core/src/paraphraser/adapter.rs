//! Back-translation through an external adapter speaking line-delimited
//! JSON over stdin/stdout.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Beam, ParaphraseSet, Source};
use crate::corpus::Utterance;
use crate::error::{Error, Result};

/// Environment variable that overrides the adapter command line.
pub const ADAPTER_ENV: &str = "NLUADV_ADAPTER_CMD";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterRequest {
    pub id: String,
    pub text: String,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterResponse {
    pub id: String,
    pub beams: Vec<String>,
}

/// Per-utterance failure; the rest of the batch is unaffected.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterFailure {
    pub original_id: String,
    pub source: Source,
    pub error: String,
}

pub trait Adapter {
    fn source(&self) -> Source;

    /// One result per request, in request order.
    fn translate(&mut self, requests: &[AdapterRequest]) -> Vec<std::result::Result<Vec<String>, String>>;
}

/// In-process adapter around a closure.
pub struct FnAdapter<F> {
    pub source: Source,
    pub f: F,
}

impl<F> Adapter for FnAdapter<F>
where
    F: FnMut(&AdapterRequest) -> std::result::Result<Vec<String>, String>,
{
    fn source(&self) -> Source {
        self.source.clone()
    }

    fn translate(&mut self, requests: &[AdapterRequest]) -> Vec<std::result::Result<Vec<String>, String>> {
        requests.iter().map(|r| (self.f)(r)).collect()
    }
}

/// Child-process adapter. Requests are pipelined up to `in_flight` and
/// matched to responses by id. A timeout, crash or early exit fails the
/// outstanding requests and the process is restarted for the rest.
#[derive(Clone, Debug)]
pub struct ProcessAdapter {
    pub program: String,
    pub args: Vec<String>,
    pub source: Source,
    pub timeout: Duration,
    pub in_flight: usize,
}

enum Event {
    Line(String),
    Eof,
}

struct Running {
    child: Child,
    stdin: Option<ChildStdin>,
    rx: Receiver<Event>,
}

impl Running {
    fn stop(mut self) -> String {
        drop(self.stdin.take());
        let _ = self.child.kill();
        match self.child.wait() {
            Ok(status) => status.to_string(),
            Err(e) => e.to_string(),
        }
    }
}

impl ProcessAdapter {
    pub fn new(program: impl Into<String>, args: Vec<String>, source: Source) -> Self {
        ProcessAdapter {
            program: program.into(),
            args,
            source,
            timeout: Duration::from_secs(30),
            in_flight: 8,
        }
    }

    /// Builds an adapter from a whitespace-separated command line, taking
    /// [`ADAPTER_ENV`] in preference to `default` when it is set.
    pub fn from_command_line(default: &str, source: Source) -> Result<Self> {
        let line = std::env::var(ADAPTER_ENV).unwrap_or_else(|_| default.to_string());
        let mut parts = line.split_whitespace().map(String::from);
        let program = parts
            .next()
            .ok_or_else(|| Error::Adapter("empty adapter command".into()))?;
        Ok(ProcessAdapter::new(program, parts.collect(), source))
    }

    fn spawn(&self) -> Result<Running> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| Error::Adapter(format!("cannot start `{}`: {e}", self.program)))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let stdin = child.stdin.take();
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                match line {
                    Ok(l) => {
                        if tx.send(Event::Line(l)).is_err() {
                            return;
                        }
                    }
                    Err(_) => break,
                }
            }
            let _ = tx.send(Event::Eof);
        });
        Ok(Running { child, stdin, rx })
    }
}

impl Adapter for ProcessAdapter {
    fn source(&self) -> Source {
        self.source.clone()
    }

    fn translate(&mut self, requests: &[AdapterRequest]) -> Vec<std::result::Result<Vec<String>, String>> {
        let mut results: Vec<Option<std::result::Result<Vec<String>, String>>> = vec![None; requests.len()];
        let mut next = 0;
        let limit = self.in_flight.max(1);
        while next < requests.len() {
            let mut proc = match self.spawn() {
                Ok(p) => p,
                Err(e) => {
                    for r in results.iter_mut().filter(|r| r.is_none()) {
                        *r = Some(Err(e.to_string()));
                    }
                    break;
                }
            };
            let mut pending: HashMap<String, usize> = HashMap::new();
            let mut order: VecDeque<usize> = VecDeque::new();
            let failure = loop {
                while pending.len() < limit && next < requests.len() {
                    let req = &requests[next];
                    let line = serde_json::to_string(req).expect("request serializes");
                    let ok = proc
                        .stdin
                        .as_mut()
                        .is_some_and(|w| writeln!(w, "{line}").and_then(|_| w.flush()).is_ok());
                    pending.insert(req.id.clone(), next);
                    order.push_back(next);
                    next += 1;
                    if !ok {
                        break;
                    }
                }
                if pending.is_empty() {
                    break None;
                }
                match proc.rx.recv_timeout(self.timeout) {
                    Ok(Event::Line(line)) => match serde_json::from_str::<AdapterResponse>(&line) {
                        Ok(resp) => {
                            if let Some(i) = pending.remove(&resp.id) {
                                order.retain(|&j| j != i);
                                results[i] = Some(Ok(resp.beams));
                            }
                        }
                        Err(e) => {
                            if let Some(i) = order.pop_front() {
                                pending.remove(&requests[i].id);
                                results[i] = Some(Err(format!("malformed adapter response: {e}")));
                            }
                        }
                    },
                    Ok(Event::Eof) => break Some("adapter exited".to_string()),
                    Err(RecvTimeoutError::Timeout) => break Some(format!("adapter timed out after {:?}", self.timeout)),
                    Err(RecvTimeoutError::Disconnected) => break Some("adapter exited".to_string()),
                }
            };
            let status = proc.stop();
            if let Some(msg) = failure {
                for (_, i) in pending.drain() {
                    results[i] = Some(Err(format!("{msg} ({status})")));
                }
            }
        }
        results
            .into_iter()
            .map(|r| r.unwrap_or_else(|| Err("no response".into())))
            .collect()
    }
}

/// Requests `k` back-translations per utterance. Each result keeps at most
/// the first `k` beams, minus those equal to the original.
pub fn backtranslate(utterances: &[Utterance], adapter: &mut dyn Adapter, k: usize) -> Vec<std::result::Result<ParaphraseSet, AdapterFailure>> {
    let source = adapter.source();
    let requests: Vec<AdapterRequest> = utterances
        .iter()
        .enumerate()
        .map(|(i, u)| AdapterRequest {
            id: i.to_string(),
            text: u.text.clone(),
            k,
        })
        .collect();
    let responses = adapter.translate(&requests);
    utterances
        .iter()
        .zip(responses)
        .map(|(u, r)| match r {
            Ok(texts) => {
                let beams = texts.into_iter().enumerate().map(|(rank, t)| Beam::new(t, 0.0 - rank as f64)).collect();
                Ok(ParaphraseSet::build(u, source.clone(), beams, k))
            }
            Err(error) => Err(AdapterFailure {
                original_id: u.id.clone(),
                source: source.clone(),
                error,
            }),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn utts(texts: &[&str]) -> Vec<Utterance> {
        texts.iter().enumerate().map(|(i, t)| Utterance::new(format!("u{i}"), *t).unwrap()).collect()
    }

    fn bt() -> Source {
        Source::BackTranslation {
            adapter: "test".into(),
            language: "es".into(),
        }
    }

    fn sh(script: &str) -> ProcessAdapter {
        let mut a = ProcessAdapter::new("sh", vec!["-c".into(), script.into()], bt());
        a.timeout = Duration::from_millis(1500);
        a
    }

    const ECHO: &str = r#"sed -u -E 's/^\{"id":"([^"]*)","text":"([^"]*)","k":[0-9]+\}$/{"id":"\1","beams":["\2","\2","\2"]}/'"#;

    #[test]
    fn echo_adapter_yields_nothing() {
        let u = utts(&["Can I get the 10 day forecast?", "when is dusk"]);
        let out = backtranslate(&u, &mut sh(ECHO), 5);
        assert_eq!(out.len(), 2);
        for r in out {
            assert!(r.unwrap().beams.is_empty());
        }
    }

    #[test]
    fn beams_kept_in_order_and_capped() {
        let u = utts(&["Can I get the 10 day forecast?"]);
        let mut a = FnAdapter {
            source: bt(),
            f: |_: &AdapterRequest| {
                Ok(vec![
                    "Can I get the 10 days forecast?".into(),
                    "can i get the 10 day forecast?".into(),
                    "Can I have the 10 day forecast?".into(),
                    "b3".into(),
                    "b4".into(),
                    "b5".into(),
                    "b6".into(),
                ])
            },
        };
        let set = backtranslate(&u, &mut a, 5).remove(0).unwrap();
        let texts: Vec<&str> = set.beams.iter().map(|b| b.text.as_str()).collect();
        assert_eq!(texts, ["Can I get the 10 days forecast?", "Can I have the 10 day forecast?", "b3", "b4"]);
        set.check(&u[0], 5).unwrap();
    }

    #[test]
    fn failures_are_isolated() {
        let u = utts(&["a b", "c d", "e f"]);
        let mut a = FnAdapter {
            source: bt(),
            f: |r: &AdapterRequest| if r.id == "1" { Err("boom".to_string()) } else { Ok(vec!["x".into()]) },
        };
        let out = backtranslate(&u, &mut a, 5);
        assert!(out[0].is_ok() && out[2].is_ok());
        let f = out[1].as_ref().unwrap_err();
        assert_eq!(f.original_id, "u1");
        assert_eq!(f.error, "boom");
    }

    #[test]
    fn process_failures_become_records() {
        let u = utts(&["a b", "c d"]);
        for script in ["exit 3", "while read l; do echo garbage; done", "sleep 10"] {
            let out = backtranslate(&u, &mut sh(script), 5);
            assert_eq!(out.len(), 2);
            assert!(out.iter().all(|r| r.is_err()), "{script}");
        }
        let missing = ProcessAdapter::new("/nonexistent/adapter", vec![], bt());
        let out = backtranslate(&u, &mut { missing }, 5);
        assert!(out.iter().all(|r| r.is_err()));
    }

    #[test]
    fn responses_matched_by_id_out_of_order() {
        // answers the second request first
        let script = r#"read a; read b; ib=$(echo "$b" | sed -E 's/.*"id":"([^"]*)".*/\1/'); ia=$(echo "$a" | sed -E 's/.*"id":"([^"]*)".*/\1/'); echo "{\"id\":\"$ib\",\"beams\":[\"second\"]}"; echo "{\"id\":\"$ia\",\"beams\":[\"first\"]}""#;
        let u = utts(&["one", "two"]);
        let mut a = sh(script);
        a.in_flight = 2;
        let out = backtranslate(&u, &mut a, 5);
        assert_eq!(out[0].as_ref().unwrap().beams[0].text, "first");
        assert_eq!(out[1].as_ref().unwrap().beams[0].text, "second");
    }

    #[test]
    fn env_override() {
        // only this test touches the variable
        std::env::set_var(ADAPTER_ENV, "sh -c true");
        let a = ProcessAdapter::from_command_line("default-adapter --flag", bt()).unwrap();
        std::env::remove_var(ADAPTER_ENV);
        assert_eq!(a.program, "sh");
        let b = ProcessAdapter::from_command_line("default-adapter --flag", bt()).unwrap();
        assert_eq!((b.program.as_str(), b.args.as_slice()), ("default-adapter", &["--flag".to_string()][..]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn sets_satisfy_invariants_for_hostile_responses(
            original in prop::sample::select(vec!["when is dusk", "Set An Alarm", "weather today"]),
            raw in prop::collection::vec(prop::sample::select(vec![
                "when is dusk", "WHEN IS DUSK", "  when   is dusk ", "set an alarm", "Set an ALARM",
                "weather today", "what is the weather", "", "x", "X", "when is sunset",
            ]), 0..12),
            k in 1usize..8,
        ) {
            let u = vec![Utterance::new("o", original).unwrap()];
            let beams = raw.iter().map(|s| s.to_string()).collect::<Vec<_>>();
            let mut a = FnAdapter { source: bt(), f: move |_: &AdapterRequest| Ok(beams.clone()) };
            let set = backtranslate(&u, &mut a, k).remove(0).unwrap();
            prop_assert!(set.check(&u[0], k).is_ok());
            prop_assert!(set.beams.iter().all(|b| !b.text.trim().is_empty()));
            // k-cap: only the first k raw beams are eligible
            let eligible: Vec<&str> = raw.iter().take(k).copied().collect();
            prop_assert!(set.beams.iter().all(|b| eligible.contains(&b.text.as_str())));
        }
    }
}
