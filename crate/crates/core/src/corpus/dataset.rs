//! Canonical line-delimited dataset format and a token/tag column importer.
//!
//! Canonical: `text<TAB>intent<TAB>label:start-end[,label:start-end...]` with an
//! optional fourth column naming the source of the example. The slot column
//! may be empty.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::bio::{bio_to_spans, Tag};
use super::{Annotation, LabelSpace, LabeledExample, SlotSpan, Utterance};
use crate::error::{Error, Result};

/// One parsed canonical line.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub line: usize,
    pub example: LabeledExample,
    pub source: Option<String>,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_slots(field: &str, line: usize) -> Result<Vec<SlotSpan>> {
    let mut slots = Vec::new();
    for item in field.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (label, range) = item
            .rsplit_once(':')
            .ok_or_else(|| parse_err(line, format!("slot `{item}` is not label:start-end")))?;
        let (a, b) = range
            .split_once('-')
            .ok_or_else(|| parse_err(line, format!("slot range `{range}` is not start-end")))?;
        let start = a.trim().parse::<usize>().map_err(|_| parse_err(line, format!("bad start index `{a}`")))?;
        let end = b.trim().parse::<usize>().map_err(|_| parse_err(line, format!("bad end index `{b}`")))?;
        let label = label.trim();
        if label.is_empty() {
            return Err(parse_err(line, "empty slot label"));
        }
        slots.push(SlotSpan::new(label, start, end));
    }
    slots.sort_by_key(|s| (s.start, s.end));
    Ok(slots)
}

/// Parses canonical records, keeping line numbers. Ids are `{prefix}-{line}`.
pub fn parse_lines<R: BufRead>(reader: R, prefix: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 || fields.len() > 4 {
            return Err(parse_err(lineno, format!("expected 2-4 tab-separated fields, found {}", fields.len())));
        }
        let utterance = Utterance::new(format!("{prefix}-{lineno}"), fields[0])
            .map_err(|_| parse_err(lineno, "empty text"))?;
        let intent = fields[1].trim();
        if intent.is_empty() {
            return Err(parse_err(lineno, "empty intent"));
        }
        let slots = parse_slots(fields.get(2).copied().unwrap_or(""), lineno)?;
        let annotation = Annotation::new(intent, slots);
        annotation
            .validate(utterance.len())
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        let source = fields.get(3).map(|s| s.trim().to_string()).filter(|s| !s.is_empty());
        out.push(Record {
            line: lineno,
            example: LabeledExample::clean(utterance, annotation),
            source,
        });
    }
    Ok(out)
}

pub fn parse_records<R: BufRead>(reader: R, prefix: &str) -> Result<Vec<LabeledExample>> {
    Ok(parse_lines(reader, prefix)?.into_iter().map(|r| r.example).collect())
}

/// Parses a training stream and builds its label space.
pub fn parse_dataset<R: BufRead>(reader: R) -> Result<(Vec<LabeledExample>, LabelSpace)> {
    let examples = parse_records(reader, "train")?;
    let ls = LabelSpace::from_examples(&examples)?;
    Ok((examples, ls))
}

fn format_slots(slots: &[SlotSpan]) -> String {
    slots.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn format_record(ex: &LabeledExample, source: Option<&str>) -> String {
    let mut line = format!(
        "{}\t{}\t{}",
        ex.utterance.normalized(),
        ex.annotation.intent,
        format_slots(&ex.annotation.slots)
    );
    if let Some(src) = source {
        line.push('\t');
        line.push_str(src);
    }
    line
}

pub fn write_records<W: Write>(mut w: W, examples: &[LabeledExample]) -> Result<()> {
    for ex in examples {
        writeln!(w, "{}", format_record(ex, None))?;
    }
    Ok(())
}

/// Token/tag column format: one `token<TAB>tag` per line, sentences separated
/// by blank lines, each sentence preceded by `# intent = <label>`.
pub fn parse_columns<R: BufRead>(reader: R, prefix: &str) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    let mut intent: Option<String> = None;
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<Tag> = Vec::new();
    let mut start_line = 0;

    let mut flush = |intent: &mut Option<String>, tokens: &mut Vec<String>, tags: &mut Vec<Tag>, line: usize| -> Result<()> {
        if tokens.is_empty() {
            if intent.is_some() {
                return Err(parse_err(line, "sentence without tokens"));
            }
            return Ok(());
        }
        let label = intent.take().ok_or_else(|| parse_err(line, "sentence without `# intent =` header"))?;
        let utt = Utterance::from_tokens(format!("{prefix}-{line}"), std::mem::take(tokens))?;
        let spans = bio_to_spans(&std::mem::take(tags));
        out.push(LabeledExample::clean(utt, Annotation::new(label, spans)));
        Ok(())
    };

    let mut last = 0;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        last = lineno;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut intent, &mut tokens, &mut tags, start_line)?;
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            if let Some((key, value)) = rest.split_once('=') {
                if key.trim() == "intent" {
                    flush(&mut intent, &mut tokens, &mut tags, start_line)?;
                    intent = Some(value.trim().to_string());
                    start_line = lineno;
                }
            }
            continue;
        }
        let (tok, tag) = trimmed
            .split_once(['\t', ' '])
            .ok_or_else(|| parse_err(lineno, "expected `token<TAB>tag`"))?;
        let tag: Tag = tag.trim().parse().map_err(|_| parse_err(lineno, format!("bad tag `{}`", tag.trim())))?;
        if tokens.is_empty() && start_line == 0 {
            start_line = lineno;
        }
        tokens.push(tok.to_lowercase());
        tags.push(tag);
    }
    flush(&mut intent, &mut tokens, &mut tags, if start_line == 0 { last } else { start_line })?;
    Ok(out)
}

/// Train/dev/test splits sharing a label space built from train only.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub label_space: LabelSpace,
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

impl Dataset {
    pub fn from_records(train: Vec<Record>, dev: Vec<Record>, test: Vec<Record>) -> Result<Self> {
        let train: Vec<LabeledExample> = train.into_iter().map(|r| r.example).collect();
        let label_space = LabelSpace::from_examples(&train)?;
        let check = |recs: Vec<Record>| -> Result<Vec<LabeledExample>> {
            recs.into_iter()
                .map(|r| {
                    label_space.check(&r.example.annotation, r.line)?;
                    Ok(r.example)
                })
                .collect()
        };
        let dev = check(dev)?;
        let test = check(test)?;
        Ok(Dataset {
            label_space,
            train,
            dev,
            test,
        })
    }

    pub fn load(train: &Path, dev: &Path, test: &Path) -> Result<Self> {
        let read = |p: &Path, prefix: &str| parse_lines(BufReader::new(File::open(p)?), prefix);
        Dataset::from_records(read(train, "train")?, read(dev, "dev")?, read(test, "test")?)
    }
}
