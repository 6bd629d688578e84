//! Clip geometry, annotations, synthetic planted-moment videos and the
//! on-disk feature format.

mod annotations;
mod feature_file;
mod synthetic;

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use annotations::{load_annotations, parse_annotations, AnnotationFormat, LoadReport, SkippedRecord};
pub use feature_file::{read_feature_file, write_feature_file, FeatureFile, FeatureManifest, FeatureRole};
pub use synthetic::{
    generate_splits, generate_synthetic_corpus, CorpusConfig, CorpusSplits, SplitSizes, SyntheticSample,
    SyntheticWorld,
};

pub const CLIP_LENGTH: usize = 16;
pub const CLIP_STRIDE: usize = 8;

/// Partition of a video's frames into overlapping fixed-length clips.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipGeometry {
    /// Frames in the source video.
    pub frame_count: usize,
    /// Frames after padding up to a multiple of the stride.
    pub padded_frame_count: usize,
    pub clip_length: usize,
    pub stride: usize,
    pub clip_count: usize,
}

impl ClipGeometry {
    /// Frame range `[8i, 8i + 16)` of clip `i`, in padded coordinates.
    pub fn clip_frames(&self, i: usize) -> Range<usize> {
        let start = i * self.stride;
        start..start + self.clip_length
    }

    /// Source frame shown at a padded frame index; padding repeats the last frame.
    pub fn source_frame(&self, padded_frame: usize) -> usize {
        padded_frame.min(self.frame_count - 1)
    }

    pub fn padding(&self) -> usize {
        self.padded_frame_count - self.frame_count
    }
}

/// Splits `frame_count` frames into `C = T/8 - 1` clips of 16 frames with
/// stride 8, padding `T` up to the next multiple of 8 first.
pub fn clip_partition(frame_count: usize) -> Result<ClipGeometry> {
    if frame_count < CLIP_LENGTH {
        return Err(Error::TooShort { frames: frame_count });
    }
    let padded = frame_count.div_ceil(CLIP_STRIDE) * CLIP_STRIDE;
    Ok(ClipGeometry {
        frame_count,
        padded_frame_count: padded,
        clip_length: CLIP_LENGTH,
        stride: CLIP_STRIDE,
        clip_count: padded / CLIP_STRIDE - 1,
    })
}

/// `t * clips / duration`, snapped to an integer when within rounding noise.
fn clip_coordinate(t: f64, duration: f64, clips: usize) -> f64 {
    let x = t * clips as f64 / duration;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

/// Smallest clip-index span whose time extent covers `span`.
pub fn timestamps_to_clip_span(span: (f64, f64), duration: f64, clip_count: usize) -> (usize, usize) {
    let last = clip_count.saturating_sub(1) as f64;
    let start = clip_coordinate(span.0, duration, clip_count).floor().clamp(0.0, last);
    let end = (clip_coordinate(span.1, duration, clip_count).ceil() - 1.0).clamp(start, last);
    (start as usize, end as usize)
}

/// Time extent of a clip-index span.
pub fn span_to_time(span: (usize, usize), clip_count: usize, duration: f64) -> (f64, f64) {
    let c = clip_count as f64;
    (span.0 as f64 / c * duration, (span.1 + 1) as f64 / c * duration)
}

/// One (video, query, ground-truth moment) triple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub video_id: String,
    /// Seconds.
    pub duration: f64,
    /// `(start, end)` in seconds.
    pub span: (f64, f64),
    pub query_tokens: Vec<u32>,
    pub query_text: String,
}

impl Annotation {
    pub fn new(
        video_id: impl Into<String>,
        duration: f64,
        span: (f64, f64),
        query_tokens: Vec<u32>,
        query_text: impl Into<String>,
    ) -> Result<Self> {
        let ann = Self { video_id: video_id.into(), duration, span, query_tokens, query_text: query_text.into() };
        ann.validate()?;
        Ok(ann)
    }

    pub fn validate(&self) -> Result<()> {
        let (s, e) = self.span;
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::Config(format!("duration {} must be positive", self.duration)));
        }
        if !(s.is_finite() && e.is_finite()) || s < 0.0 || s >= e {
            return Err(Error::Config(format!("span ({s}, {e}) must satisfy 0 <= start < end")));
        }
        if e > self.duration {
            return Err(Error::Config(format!("span end {e} exceeds duration {}", self.duration)));
        }
        if self.query_tokens.is_empty() {
            return Err(Error::Config("query has no tokens".into()));
        }
        Ok(())
    }
}

/// Word-to-id table with id 0 reserved for unknown words.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub const UNK: u32 = 0;

    pub fn new() -> Self {
        let mut v = Self::default();
        v.words.push("<unk>".into());
        v.index.insert("<unk>".into(), Self::UNK);
        v
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn intern(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len() as u32;
        self.words.push(word.to_owned());
        self.index.insert(word.to_owned(), id);
        id
    }

    pub fn lookup(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(Self::UNK)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Lowercased alphanumeric words, interned.
    pub fn tokenize(&mut self, text: &str) -> Vec<u32> {
        split_words(text).map(|w| self.intern(&w)).collect()
    }
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}
