//! Synthetic planted-moment videos.
//!
//! Every topic owns a unit prototype per feature stream and a region of the
//! vocabulary. A sample picks a target topic, draws a query from that topic's
//! words, and plants the prototype into the clips of its ground-truth moment:
//! a planted row is `m * p + sqrt(1 - m^2) * u` for a background row `u`, so
//! its expected cosine to `p` is the margin `m` while unplanted rows sit at
//! zero. Background rows of one video share a direction, like the slowly
//! changing scenery of real footage. A second, non-overlapping segment
//! carries a different topic so that the query is needed to tell the two
//! apart.
//!
//! The world also publishes a word-vector table standing in for pretrained
//! embeddings: words of one topic cluster around a shared direction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{clip_partition, timestamps_to_clip_span, Annotation, ClipGeometry};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub samples: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub fps: f64,
    pub vocab_size: usize,
    pub topic_count: usize,
    /// Ids `1..=shared_words` are topic-neutral filler words.
    pub shared_words: usize,
    pub query_len: [usize; 2],
    /// Probability that a query token after the first is a topic word.
    pub topic_word_prob: f64,
    pub raw_dim: usize,
    pub background_dim: usize,
    pub appearance_dim: usize,
    pub motion_dim: usize,
    /// Expected cosine between a planted raw clip row and its prototype.
    pub margin: f64,
    /// Planted strength of the cheap streams relative to `margin`.
    pub bam_margin_scale: f64,
    /// Moment length as a fraction of the video duration.
    pub moment_fraction: [f64; 2],
    pub distractor: bool,
    /// Cosine between a background row and its video's background direction.
    pub temporal_coherence: f64,
    /// Cosine between a topic word's vector and its topic direction.
    pub word_vector_coherence: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            samples: 500,
            min_frames: 152,
            max_frames: 256,
            fps: 8.0,
            vocab_size: 200,
            topic_count: 8,
            shared_words: 16,
            query_len: [4, 8],
            topic_word_prob: 0.7,
            raw_dim: 32,
            background_dim: 16,
            appearance_dim: 16,
            motion_dim: 16,
            margin: 0.5,
            bam_margin_scale: 0.6,
            moment_fraction: [0.2, 0.4],
            distractor: true,
            temporal_coherence: 0.8,
            word_vector_coherence: 0.7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.topic_count == 0 {
            return bad("topic_count must be positive".into());
        }
        if self.topic_count > self.vocab_size {
            return bad(format!("topic_count {} exceeds vocab_size {}", self.topic_count, self.vocab_size));
        }
        if self.vocab_size <= 1 + self.shared_words || (self.vocab_size - 1 - self.shared_words) < self.topic_count {
            return bad(format!(
                "vocab_size {} leaves no topic words for {} topics after {} shared words",
                self.vocab_size, self.topic_count, self.shared_words
            ));
        }
        if self.min_frames < 16 || self.min_frames > self.max_frames {
            return bad(format!("frame range [{}, {}] is invalid", self.min_frames, self.max_frames));
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive".into());
        }
        if self.query_len[0] == 0 || self.query_len[0] > self.query_len[1] {
            return bad(format!("query_len {:?} is invalid", self.query_len));
        }
        if !(0.0..=1.0).contains(&self.margin) || !(0.0..=1.0).contains(&(self.margin * self.bam_margin_scale)) {
            return bad("margin and margin * bam_margin_scale must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.temporal_coherence) || !(0.0..=1.0).contains(&self.word_vector_coherence) {
            return bad("temporal_coherence and word_vector_coherence must lie in [0, 1]".into());
        }
        let [lo, hi] = self.moment_fraction;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("moment_fraction {:?} is invalid", self.moment_fraction));
        }
        if [self.raw_dim, self.background_dim, self.appearance_dim, self.motion_dim].contains(&0) {
            return bad("feature dimensions must be positive".into());
        }
        Ok(())
    }

    pub fn bam_dim(&self) -> usize {
        self.background_dim + self.appearance_dim + self.motion_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { train: 500, val: 100, test: 100 }
    }
}

#[derive(Clone, Debug)]
pub struct TopicPrototypes {
    pub raw: Vec<f64>,
    pub background: Vec<f64>,
    pub appearance: Vec<f64>,
    pub motion: Vec<f64>,
}

/// Topic prototypes and vocabulary layout shared by every split of a seed.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub config: CorpusConfig,
    pub topics: Vec<TopicPrototypes>,
}

impl SyntheticWorld {
    pub fn new(seed: u64, config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.topic_count;
        let raw = orthonormal_set(k, config.raw_dim, &mut rng);
        let background = orthonormal_set(k, config.background_dim, &mut rng);
        let appearance = orthonormal_set(k, config.appearance_dim, &mut rng);
        let motion = orthonormal_set(k, config.motion_dim, &mut rng);
        let topics = (0..k)
            .map(|t| TopicPrototypes {
                raw: raw[t].clone(),
                background: background[t].clone(),
                appearance: appearance[t].clone(),
                motion: motion[t].clone(),
            })
            .collect();
        Ok(Self { seed, config: config.clone(), topics })
    }

    fn region_width(&self) -> usize {
        (self.config.vocab_size - 1 - self.config.shared_words) / self.config.topic_count
    }

    /// Token ids owned by `topic`.
    pub fn topic_words(&self, topic: usize) -> std::ops::Range<u32> {
        let base = 1 + self.config.shared_words + topic * self.region_width();
        base as u32..(base + self.region_width()) as u32
    }

    /// Topic owning `token`, if it is a topic word.
    pub fn topic_of(&self, token: u32) -> Option<usize> {
        let base = (1 + self.config.shared_words) as u32;
        if token < base {
            return None;
        }
        let t = ((token - base) as usize) / self.region_width();
        (t < self.config.topic_count).then_some(t)
    }

    /// `vocab_size x dim` word vectors. Row 0 (unknown) is zero, shared words
    /// are random unit vectors and topic words lean toward their topic.
    pub fn word_vectors(&self, dim: usize) -> Mat {
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(WORD_VECTOR_STREAM);
        let directions = orthonormal_set(cfg.topic_count, dim, &mut rng);
        let mut table = Mat::zeros(cfg.vocab_size, dim);
        for token in 1..cfg.vocab_size {
            let row = match self.topic_of(token as u32) {
                Some(t) => planted_row(&directions[t], cfg.word_vector_coherence, &random_unit(dim, &mut rng)),
                None => random_unit(dim, &mut rng),
            };
            table.row_mut(token).copy_from_slice(&row);
        }
        table
    }

    fn sample<R: Rng>(&self, video_id: String, rng: &mut R) -> Result<SyntheticSample> {
        let cfg = &self.config;
        let frames = rng.gen_range(cfg.min_frames..=cfg.max_frames);
        let geometry = clip_partition(frames)?;
        let c = geometry.clip_count;
        let duration = frames as f64 / cfg.fps;

        let topic = rng.gen_range(0..cfg.topic_count);
        let frac = rng.gen_range(cfg.moment_fraction[0]..=cfg.moment_fraction[1]);
        let len = frac * duration;
        let start = rng.gen_range(0.0..=(duration - len));
        let span = (start, (start + len).min(duration));
        let clip_span = timestamps_to_clip_span(span, duration, c);

        let n = rng.gen_range(cfg.query_len[0]..=cfg.query_len[1]);
        let words = self.topic_words(topic);
        let mut tokens = vec![rng.gen_range(words.clone())];
        for _ in 1..n {
            let tok = if rng.gen_bool(cfg.topic_word_prob) {
                rng.gen_range(words.clone())
            } else {
                rng.gen_range(1..=cfg.shared_words as u32)
            };
            tokens.push(tok);
        }
        tokens.shuffle(rng);
        let query_text = tokens.iter().map(|t| format!("w{t}")).collect::<Vec<_>>().join(" ");

        // Per-clip topic assignment: target moment, optional distractor, else none.
        let mut planted: Vec<Option<usize>> = vec![None; c];
        for slot in &mut planted[clip_span.0..=clip_span.1] {
            *slot = Some(topic);
        }
        let mut distractor_topic = None;
        if cfg.distractor && cfg.topic_count > 1 {
            let other = (topic + rng.gen_range(1..cfg.topic_count)) % cfg.topic_count;
            let want = clip_span.1 - clip_span.0 + 1;
            let left = clip_span.0.saturating_sub(1);
            let right = c.saturating_sub(clip_span.1 + 2);
            let (lo, room) = if left >= right { (0, left) } else { (clip_span.1 + 2, right) };
            let len = want.min(room);
            if len > 0 {
                let off = lo + rng.gen_range(0..=room - len);
                for slot in &mut planted[off..off + len] {
                    *slot = Some(other);
                }
                distractor_topic = Some(other);
            }
        }

        let bam_margin = cfg.margin * cfg.bam_margin_scale;
        let coherence = cfg.temporal_coherence;
        let stream = |dim: usize, margin: f64, pick: fn(&TopicPrototypes) -> &Vec<f64>, rng: &mut R| {
            let scene = random_unit(dim, rng);
            let mut m = Mat::zeros(c, dim);
            for (i, p) in planted.iter().enumerate() {
                let background = planted_row(&scene, coherence, &random_unit(dim, rng));
                let row = match p {
                    Some(t) => planted_row(pick(&self.topics[*t]), margin, &background),
                    None => background,
                };
                m.row_mut(i).copy_from_slice(&row);
            }
            m
        };
        let raw_clip_features = stream(cfg.raw_dim, cfg.margin, |t| &t.raw, rng);
        let background = stream(cfg.background_dim, bam_margin, |t| &t.background, rng);
        let appearance = stream(cfg.appearance_dim, bam_margin, |t| &t.appearance, rng);
        let motion = stream(cfg.motion_dim, bam_margin, |t| &t.motion, rng);

        let annotation = Annotation::new(video_id, duration, span, tokens, query_text)?;
        Ok(SyntheticSample {
            annotation,
            geometry,
            clip_span,
            raw_clip_features,
            background,
            appearance,
            motion,
            latent_topic: topic,
            distractor_topic,
        })
    }

    /// `n` samples from stream `stream` of `seed`.
    pub fn samples(&self, seed: u64, stream: u64, n: usize, prefix: &str) -> Result<Vec<SyntheticSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        (0..n).map(|i| self.sample(format!("{prefix}-{i:05}"), &mut rng)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub annotation: Annotation,
    pub geometry: ClipGeometry,
    /// Ground-truth clip-index span.
    pub clip_span: (usize, usize),
    /// Input to the expensive clip encoder, `C x raw_dim`.
    pub raw_clip_features: Mat,
    pub background: Mat,
    pub appearance: Mat,
    pub motion: Mat,
    pub latent_topic: usize,
    pub distractor_topic: Option<usize>,
}

impl SyntheticSample {
    pub fn clip_count(&self) -> usize {
        self.geometry.clip_count
    }
}

#[derive(Clone, Debug)]
pub struct CorpusSplits {
    pub world: SyntheticWorld,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

/// `config.samples` samples; a pure function of `(seed, config)`.
pub fn generate_synthetic_corpus(seed: u64, config: &CorpusConfig) -> Result<Vec<SyntheticSample>> {
    SyntheticWorld::new(seed, config)?.samples(seed, 1, config.samples, &format!("syn{seed}-train"))
}

/// Train, validation and test splits drawn from disjoint RNG streams of the
/// same seed; all three share one world.
pub fn generate_splits(seed: u64, config: &CorpusConfig, sizes: SplitSizes) -> Result<CorpusSplits> {
    let world = SyntheticWorld::new(seed, config)?;
    let train = world.samples(seed, 1, sizes.train, &format!("syn{seed}-train"))?;
    let val = world.samples(seed, 2, sizes.val, &format!("syn{seed}-val"))?;
    let test = world.samples(seed, 3, sizes.test, &format!("syn{seed}-test"))?;
    Ok(CorpusSplits { world, train, val, test })
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

const WORD_VECTOR_STREAM: u64 = 4;

/// `m * proto + sqrt(1 - m^2) * noise`, renormalised to unit length.
fn planted_row(proto: &[f64], margin: f64, noise: &[f64]) -> Vec<f64> {
    let k = (1.0 - margin * margin).sqrt();
    let v: Vec<f64> = proto.iter().zip(noise).map(|(p, u)| margin * p + k * u).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return proto.to_vec();
    }
    v.into_iter().map(|x| x / norm).collect()
}

/// `count` unit vectors, mutually orthogonal for as many as `dim` allows.
fn orthonormal_set<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = random_unit(dim, rng);
        if out.len() < dim {
            for b in &out {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
        }
        out.push(v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine_similarity;

    /// Mean cosine of raw rows to the target prototype, inside and outside the moment.
    fn in_out_similarity(world: &SyntheticWorld, samples: &[SyntheticSample], limit: usize) -> (Vec<f64>, Vec<f64>) {
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for s in samples {
            let proto = &world.topics[s.latent_topic].raw;
            for i in 0..s.clip_count() {
                let sim = cosine_similarity(s.raw_clip_features.row(i), proto);
                if (s.clip_span.0..=s.clip_span.1).contains(&i) {
                    inside.push(sim);
                } else {
                    outside.push(sim);
                }
            }
            if inside.len() >= limit && outside.len() >= limit {
                break;
            }
        }
        inside.truncate(limit);
        outside.truncate(limit);
        (inside, outside)
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn generation_is_bit_identical_per_seed() {
        let cfg = CorpusConfig::default();
        let a = generate_synthetic_corpus(0, &cfg).unwrap();
        let b = generate_synthetic_corpus(0, &cfg).unwrap();
        assert_eq!(a.len(), 500);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.annotation, y.annotation);
            let bits = |m: &Mat| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&x.raw_clip_features), bits(&y.raw_clip_features));
            assert_eq!(bits(&x.motion), bits(&y.motion));
        }
        let c = generate_synthetic_corpus(1, &cfg).unwrap();
        assert_ne!(a[0].annotation, c[0].annotation);
    }

    #[test]
    fn too_many_topics_is_rejected() {
        let cfg = CorpusConfig { vocab_size: 10, topic_count: 11, ..Default::default() };
        assert!(matches!(generate_synthetic_corpus(0, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn margin_half_separates_by_about_half() {
        let cfg = CorpusConfig { samples: 200, ..Default::default() };
        let world = SyntheticWorld::new(3, &cfg).unwrap();
        let samples = world.samples(3, 1, cfg.samples, "t").unwrap();
        let (inside, outside) = in_out_similarity(&world, &samples, 1000);
        assert_eq!(inside.len(), 1000);
        let gap = mean(&inside) - mean(&outside);
        assert!((0.4..=0.6).contains(&gap), "gap {gap}");
    }

    #[test]
    fn zero_margin_is_indistinguishable() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let cfg = CorpusConfig { samples: 200, margin: 0.0, ..Default::default() };
        let world = SyntheticWorld::new(5, &cfg).unwrap();
        let samples = world.samples(5, 1, cfg.samples, "t").unwrap();
        let (inside, outside) = in_out_similarity(&world, &samples, 1000);
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        // Welch statistic; with 1000 per group the normal approximation is exact enough.
        let t = (mean(&inside) - mean(&outside)) / (var(&inside) / 1000.0 + var(&outside) / 1000.0).sqrt();
        let p = 2.0 * (1.0 - Normal::new(0.0, 1.0).unwrap().cdf(t.abs()));
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn queries_come_from_the_topic_region() {
        let cfg = CorpusConfig { samples: 50, ..Default::default() };
        let world = SyntheticWorld::new(0, &cfg).unwrap();
        for s in world.samples(0, 1, 50, "t").unwrap() {
            let topics: Vec<usize> = s.annotation.query_tokens.iter().filter_map(|&t| world.topic_of(t)).collect();
            assert!(!topics.is_empty());
            assert!(topics.iter().all(|&t| t == s.latent_topic));
            assert_eq!(timestamps_to_clip_span(s.annotation.span, s.annotation.duration, s.clip_count()), s.clip_span);
        }
    }

    #[test]
    fn prototypes_are_orthonormal() {
        let world = SyntheticWorld::new(0, &CorpusConfig::default()).unwrap();
        for a in 0..world.topics.len() {
            for b in 0..world.topics.len() {
                let d: f64 = world.topics[a].raw.iter().zip(&world.topics[b].raw).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn word_vectors_cluster_by_topic() {
        let cfg = CorpusConfig::default();
        let world = SyntheticWorld::new(4, &cfg).unwrap();
        let table = world.word_vectors(48);
        assert_eq!(table.shape(), (cfg.vocab_size, 48));
        assert!(table.row(0).iter().all(|&x| x == 0.0));
        assert_eq!(table, world.word_vectors(48));
        let cos = |a: u32, b: u32| -> f64 { table.row(a as usize).iter().zip(table.row(b as usize)).map(|(x, y)| x * y).sum() };
        let (mut same, mut other) = (Vec::new(), Vec::new());
        for a in world.topic_words(0) {
            for b in world.topic_words(0) {
                if a < b {
                    same.push(cos(a, b));
                }
            }
            for b in world.topic_words(1) {
                other.push(cos(a, b));
            }
        }
        // Coherence c puts c^2 of each unit vector along the shared direction.
        let c2 = cfg.word_vector_coherence.powi(2);
        assert!(mean(&same) > mean(&other) + 0.5 * c2, "{} vs {}", mean(&same), mean(&other));
        assert!(mean(&other).abs() < 0.1);
    }
}
