//! The full retrieval model: frozen encoders, the shared cross-modal path,
//! the span head and the spotter.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{span_to_time, SyntheticSample};
use crate::encoders::{semantic_index, BamProviders, ClipEncoder, FeatureSource, QueryEncoder};
use crate::error::{Error, Result};
use crate::fusion::{CrossModalEncoder, Highlight, HighlightOut, SpanPrediction, SpanPredictor};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::spotter::{run_spotter, ClipSource, GateConfig, GateMode, SelectionState, SpotterHead, SpotterInputs};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub query_hidden: usize,
    /// Width of query features and expensive clip features.
    pub feature_dim: usize,
    pub clip_hidden: usize,
    /// Width of the cross-modal embedding.
    pub hidden_dim: usize,
    pub heads: usize,
    pub max_clips: usize,
    /// Spans kept per prediction.
    pub top_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 300,
            query_hidden: 64,
            feature_dim: 64,
            clip_hidden: 64,
            hidden_dim: 128,
            heads: 4,
            max_clips: 64,
            top_k: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.embed_dim, self.query_hidden, self.feature_dim, self.clip_hidden, self.hidden_dim];
        if dims.contains(&0) || self.heads == 0 || self.max_clips == 0 || self.top_k == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Input widths fixed by the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub vocab_size: usize,
    pub raw_dim: usize,
    pub bam_dims: [usize; 3],
}

impl InputDims {
    pub fn semantic_dim(&self) -> usize {
        self.bam_dims.iter().sum()
    }
}

/// Everything the frozen encoders produce for one sample.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub video_id: String,
    pub semantic: Mat,
    pub query: Mat,
    /// Every clip through the expensive encoder.
    pub encoded: Mat,
    pub raw: Mat,
    pub gt_clips: (usize, usize),
    pub gt_time: (f64, f64),
    pub duration: f64,
    pub bam_times: [Duration; 3],
}

impl PreparedSample {
    pub fn clip_count(&self) -> usize {
        self.semantic.rows()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// Cross-modal embedding before highlight scaling.
    pub embedding: Var,
    pub highlight: HighlightOut,
    pub log_p_s: Var,
    pub log_p_e: Var,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub spans: SpanPrediction,
    /// Top spans in seconds, best first.
    pub times: Vec<(f64, f64)>,
    pub highlight: Vec<f64>,
    pub clip_count: usize,
    pub selected: usize,
    pub calls: usize,
    pub steps: usize,
    /// Clips added by each spotter step.
    pub selected_per_step: Vec<Vec<usize>>,
    /// Wall-clock time of the whole prediction.
    pub exec_time: Duration,
    /// The part of `exec_time` spent in the expensive encoder.
    pub encode_time: Duration,
}

impl Prediction {
    pub fn selected_fraction(&self) -> f64 {
        self.selected as f64 / self.clip_count as f64
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub dims: InputDims,
    pub store: ParamStore,
    pub query: QueryEncoder,
    pub clip: ClipEncoder,
    pub semantic_proj: Linear,
    pub fusion: CrossModalEncoder,
    pub highlight: Highlight,
    pub span: SpanPredictor,
    pub spotter: SpotterHead,
}

impl Model {
    pub fn new(config: &ModelConfig, dims: InputDims, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config;
        let query = QueryEncoder::new(&mut store, dims.vocab_size, c.embed_dim, c.query_hidden, c.feature_dim, &mut rng);
        let clip = ClipEncoder::new(&mut store, dims.raw_dim, c.clip_hidden, c.feature_dim, &mut rng);
        let semantic_proj = Linear::new(&mut store, "semantic_proj", dims.semantic_dim(), c.feature_dim, &mut rng);
        let fusion = CrossModalEncoder::new(
            &mut store,
            "fusion",
            2 * c.feature_dim,
            c.feature_dim,
            c.hidden_dim,
            c.heads,
            c.max_clips,
            &mut rng,
        );
        let highlight = Highlight::new(&mut store, "highlight", c.hidden_dim, &mut rng);
        let span = SpanPredictor::new(&mut store, "span", c.hidden_dim, c.heads, &mut rng);
        let spotter = SpotterHead::new(&mut store, "spotter", c.hidden_dim, &mut rng);
        // Parameters are stored at f32 precision throughout so checkpoints are exact.
        store.round_to_f32();
        Ok(Self { config: config.clone(), dims, store, query, clip, semantic_proj, fusion, highlight, span, spotter })
    }

    /// Parameters of the frozen encoders.
    pub fn frozen_params(&self) -> Vec<ParamId> {
        let mut p = self.query.params();
        p.extend(self.clip.params());
        p
    }

    /// Parameters the teacher trains and the student inherits.
    pub fn shared_params(&self) -> Vec<ParamId> {
        let mut p = self.semantic_proj.params();
        p.extend(self.fusion.params());
        p.extend(self.highlight.params());
        p.extend(self.span.params());
        p
    }

    pub fn spotter_params(&self) -> Vec<ParamId> {
        self.spotter.params()
    }

    /// Makes exactly `ids` trainable.
    pub fn set_trainable(&mut self, ids: &[ParamId]) {
        let all: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in all {
            self.store.set_trainable(id, ids.contains(&id));
        }
    }

    /// Copies every parameter except the spotter head from `other`.
    pub fn copy_shared_from(&mut self, other: &Model) -> Result<()> {
        if self.config != other.config || self.dims != other.dims {
            return Err(Error::Config("teacher and student architectures differ".into()));
        }
        let spotter = self.spotter_params();
        let ids: Vec<ParamId> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            if !spotter.contains(&id) {
                *self.store.get_mut(id) = other.store.get(id).clone();
            }
        }
        Ok(())
    }

    /// Runs the frozen encoders over a synthetic sample.
    pub fn prepare(&self, sample: &SyntheticSample, providers: &BamProviders) -> Result<PreparedSample> {
        let a = &sample.annotation;
        self.prepare_from(
            sample,
            &sample.raw_clip_features,
            &a.query_tokens,
            providers,
            sample.clip_span,
            a.span,
            a.duration,
            &a.video_id,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn prepare_from(
        &self,
        video: &dyn FeatureSource,
        raw: &Mat,
        tokens: &[u32],
        providers: &BamProviders,
        gt_clips: (usize, usize),
        gt_time: (f64, f64),
        duration: f64,
        video_id: &str,
    ) -> Result<PreparedSample> {
        let clips = video.geometry().clip_count;
        if clips > self.config.max_clips {
            return Err(Error::Config(format!(
                "video {video_id} has {clips} clips, the model handles at most {}",
                self.config.max_clips
            )));
        }
        if raw.shape() != (clips, self.dims.raw_dim) {
            return Err(Error::Shape {
                what: format!("raw clip features of {video_id}"),
                expected: (clips, self.dims.raw_dim),
                actual: raw.shape(),
            });
        }
        if tokens.is_empty() {
            return Err(Error::Config(format!("query of {video_id} has no tokens")));
        }
        let index = semantic_index(video, providers, self.dims.bam_dims)?;
        Ok(PreparedSample {
            video_id: video_id.to_string(),
            semantic: index.features().clone(),
            query: self.query.encode(&self.store, tokens),
            encoded: self.clip.encode_all(&self.store, raw),
            raw: raw.clone(),
            gt_clips,
            gt_time,
            duration,
            bam_times: index.timings,
        })
    }

    fn inputs(&self, g: &mut Graph, prep: &PreparedSample) -> (Var, Var) {
        let s = g.constant(prep.semantic.clone());
        let semantic = self.semantic_proj.forward(g, s);
        let query = g.constant(prep.query.clone());
        (semantic, query)
    }

    fn head(&self, g: &mut Graph, features: Var, semantic: Var, query: Var) -> Outputs {
        let x = g.concat_cols(&[features, semantic]);
        let embedding = self.fusion.forward(g, x, query);
        let highlight = self.highlight.forward(g, embedding);
        let (log_p_s, log_p_e) = self.span.forward(g, highlight.scaled);
        Outputs { embedding, highlight, log_p_s, log_p_e }
    }

    /// Full computation: every clip's expensive features.
    pub fn forward_full(&self, g: &mut Graph, prep: &PreparedSample) -> Outputs {
        let (semantic, query) = self.inputs(g, prep);
        let features = g.constant(prep.encoded.clone());
        self.head(g, features, semantic, query)
    }

    /// Spotter selection followed by the shared cross-modal path.
    pub fn forward_spotter<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        prep: &PreparedSample,
        gate: &GateConfig,
        lazy: bool,
        rng: &mut R,
    ) -> Result<(Outputs, SelectionState)> {
        let (semantic, query) = self.inputs(g, prep);
        let clips = if lazy {
            ClipSource::Lazy { encoder: &self.clip, raw: &prep.raw }
        } else {
            ClipSource::Encoded(&prep.encoded)
        };
        let inputs = SpotterInputs { fusion: &self.fusion, head: &self.spotter, semantic, query, clips };
        let state = run_spotter(g, &inputs, gate, rng)?;
        let out = self.head(g, state.features, semantic, query);
        Ok((out, state))
    }

    /// Deterministic inference. With a gate config the spotter selects clips
    /// by threshold and only those are encoded; without one every clip is.
    pub fn predict(&self, prep: &PreparedSample, gate: Option<&GateConfig>) -> Result<Prediction> {
        let start = Instant::now();
        let mut g = Graph::new(&self.store);
        let clips = prep.clip_count();
        let (out, selected, calls, steps, per_step, encode_time) = match gate {
            None => {
                let (semantic, query) = self.inputs(&mut g, prep);
                // The baseline pass runs the expensive encoder itself so timings compare.
                let t = Instant::now();
                let encoded = self.clip.encode_all(&self.store, &prep.raw);
                let encode_time = t.elapsed();
                let features = g.constant(encoded);
                (self.head(&mut g, features, semantic, query), clips, clips, 0, Vec::new(), encode_time)
            }
            Some(cfg) => {
                let cfg = cfg.with_mode(GateMode::EvalThreshold);
                // Threshold gates draw no noise; the generator is never read.
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let (out, state) = self.forward_spotter(&mut g, prep, &cfg, true, &mut rng)?;
                let per_step = state.trace.iter().map(|t| t.selected.clone()).collect();
                let encode_time = state.trace.iter().map(|t| t.encode_time).sum();
                (out, state.selected(), state.total_calls(), state.step, per_step, encode_time)
            }
        };
        let log_p_s = g.value(out.log_p_s).data().to_vec();
        let log_p_e = g.value(out.log_p_e).data().to_vec();
        if !log_p_s.iter().chain(&log_p_e).all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("span log-probabilities of {}", prep.video_id)));
        }
        let spans = SpanPrediction::new(log_p_s, log_p_e, self.config.top_k);
        let times = spans.top_k.iter().map(|s| span_to_time((s.start, s.end), clips, prep.duration)).collect();
        Ok(Prediction {
            times,
            highlight: g.value(out.highlight.scores).data().to_vec(),
            spans,
            clip_count: clips,
            selected,
            calls,
            steps,
            selected_per_step: per_step,
            exec_time: start.elapsed(),
            encode_time,
        })
    }
}
