use std::collections::HashMap;
use std::path::Path;

use log::warn;
use serde::Deserialize;

use super::{Annotation, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnnotationFormat {
    /// A list of `{video_id, duration, timestamps: [s, e], sentence}` records,
    /// or the grouped `{video_id: {duration, timestamps, sentences}}` layout.
    Json,
    /// One `video_id start end##sentence` record per line.
    CharadesText,
}

impl std::str::FromStr for AnnotationFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "charades_text" | "charades" => Ok(Self::CharadesText),
            other => Err(Error::Config(format!("unknown annotation format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedRecord {
    /// 1-based line number for text input, 1-based record number for JSON.
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub annotations: Vec<Annotation>,
    pub skipped: Vec<SkippedRecord>,
}

impl LoadReport {
    fn skip(&mut self, line: usize, reason: impl Into<String>) {
        let reason = reason.into();
        warn!("skipping annotation record {line}: {reason}");
        self.skipped.push(SkippedRecord { line, reason });
    }
}

/// Reads an annotation file. Records that violate the annotation invariants
/// are skipped and reported, not fatal. Text records carry no duration; when
/// `durations` has no entry for a video its duration is taken to be the span end.
pub fn load_annotations(
    path: impl AsRef<Path>,
    format: AnnotationFormat,
    vocab: &mut Vocabulary,
    durations: Option<&HashMap<String, f64>>,
) -> Result<LoadReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, format, vocab, durations)
}

pub fn parse_annotations(
    text: &str,
    format: AnnotationFormat,
    vocab: &mut Vocabulary,
    durations: Option<&HashMap<String, f64>>,
) -> Result<LoadReport> {
    match format {
        AnnotationFormat::CharadesText => Ok(parse_charades(text, vocab, durations)),
        AnnotationFormat::Json => parse_json(text, vocab),
    }
}

fn parse_charades(text: &str, vocab: &mut Vocabulary, durations: Option<&HashMap<String, f64>>) -> LoadReport {
    let mut report = LoadReport::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let Some((head, sentence)) = line.split_once("##") else {
            report.skip(line_no, "missing `##` separator");
            continue;
        };
        let fields: Vec<&str> = head.split_whitespace().collect();
        let [video_id, start, end] = fields[..] else {
            report.skip(line_no, format!("expected `video_id start end`, found {} fields", fields.len()));
            continue;
        };
        let (Ok(start), Ok(end)) = (start.parse::<f64>(), end.parse::<f64>()) else {
            report.skip(line_no, "timestamps are not numbers");
            continue;
        };
        let duration = durations.and_then(|d| d.get(video_id).copied()).unwrap_or(end);
        let tokens = vocab.tokenize(sentence);
        match Annotation::new(video_id, duration, (start, end), tokens, sentence.trim()) {
            Ok(a) => report.annotations.push(a),
            Err(e) => report.skip(line_no, e.to_string()),
        }
    }
    report
}

#[derive(Deserialize)]
struct JsonRecord {
    video_id: String,
    duration: f64,
    timestamps: [f64; 2],
    sentence: String,
}

#[derive(Deserialize)]
struct GroupedVideo {
    duration: f64,
    timestamps: Vec<[f64; 2]>,
    sentences: Vec<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum JsonLayout {
    Records(Vec<JsonRecord>),
    Grouped(std::collections::BTreeMap<String, GroupedVideo>),
}

fn parse_json(text: &str, vocab: &mut Vocabulary) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    if text.trim().is_empty() {
        return Ok(report);
    }
    let records: Vec<JsonRecord> = match serde_json::from_str::<JsonLayout>(text)? {
        JsonLayout::Records(r) => r,
        JsonLayout::Grouped(videos) => {
            let mut out = Vec::new();
            for (video_id, v) in videos {
                if v.timestamps.len() != v.sentences.len() {
                    warn!("{video_id}: {} timestamps but {} sentences", v.timestamps.len(), v.sentences.len());
                }
                for (ts, sentence) in v.timestamps.into_iter().zip(v.sentences) {
                    out.push(JsonRecord { video_id: video_id.clone(), duration: v.duration, timestamps: ts, sentence });
                }
            }
            out
        }
    };
    for (idx, r) in records.into_iter().enumerate() {
        let tokens = vocab.tokenize(&r.sentence);
        match Annotation::new(r.video_id, r.duration, (r.timestamps[0], r.timestamps[1]), tokens, r.sentence.trim()) {
            Ok(a) => report.annotations.push(a),
            Err(e) => report.skip(idx + 1, e.to_string()),
        }
    }
    Ok(report)
}
