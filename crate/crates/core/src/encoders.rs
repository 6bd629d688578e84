//! Frozen feature extractors: the cheap semantic index, the bidirectional
//! GRU query encoder and the expensive per-clip encoder.
//!
//! These run outside the autodiff graph; their parameters live in the model's
//! [`ParamStore`] but are never marked trainable.

use std::time::{Duration, Instant};

use rand::Rng;

use crate::corpus::{ClipGeometry, FeatureFile, FeatureRole, SyntheticSample};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{sigmoid, Mat};

/// The frames a provider may look at for one clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipView {
    pub index: usize,
    /// First frame of the clip, in padded coordinates.
    pub start_frame: usize,
    /// One past the last frame.
    pub end_frame: usize,
    /// The single frame sampled from the clip for image-level features.
    pub sampled_frame: usize,
}

impl ClipView {
    pub fn new(geometry: &ClipGeometry, index: usize) -> Self {
        let frames = geometry.clip_frames(index);
        let mid = frames.start + geometry.clip_length / 2;
        Self {
            index,
            start_frame: frames.start,
            end_frame: frames.end,
            sampled_frame: geometry.source_frame(mid),
        }
    }
}

/// Something providers can read per-clip features from.
pub trait FeatureSource {
    fn geometry(&self) -> &ClipGeometry;
    /// Precomputed row of stream `role` for clip `clip`, if the source has one.
    fn stored_row(&self, role: FeatureRole, clip: usize) -> Option<&[f64]>;
}

impl FeatureSource for SyntheticSample {
    fn geometry(&self) -> &ClipGeometry {
        &self.geometry
    }

    fn stored_row(&self, role: FeatureRole, clip: usize) -> Option<&[f64]> {
        let m = match role {
            FeatureRole::Background => &self.background,
            FeatureRole::Appearance => &self.appearance,
            FeatureRole::Motion => &self.motion,
            FeatureRole::Clip => &self.raw_clip_features,
            FeatureRole::Embedding => return None,
        };
        (clip < m.rows()).then(|| m.row(clip))
    }
}

/// Features loaded from feature files.
#[derive(Clone, Debug)]
pub struct StoredVideo {
    pub geometry: ClipGeometry,
    pub streams: Vec<(FeatureRole, Mat)>,
}

impl StoredVideo {
    pub fn from_files(geometry: ClipGeometry, files: &[FeatureFile]) -> Result<Self> {
        let mut streams = Vec::new();
        for f in files {
            f.check_geometry(&geometry)?;
            streams.push((f.manifest.role, f.to_mat()));
        }
        Ok(Self { geometry, streams })
    }
}

impl FeatureSource for StoredVideo {
    fn geometry(&self) -> &ClipGeometry {
        &self.geometry
    }

    fn stored_row(&self, role: FeatureRole, clip: usize) -> Option<&[f64]> {
        self.streams.iter().find(|(r, _)| *r == role).map(|(_, m)| m.row(clip))
    }
}

pub trait BamProvider: Send + Sync {
    fn role(&self) -> FeatureRole;
    fn dim(&self) -> usize;
    fn extract(&self, video: &dyn FeatureSource, clip: ClipView) -> Result<Vec<f64>>;
}

/// Reads precomputed rows. The motion stream is addressed through the clip's
/// start and end frames, the image streams through the sampled frame.
#[derive(Clone, Debug)]
pub struct StoredProvider {
    pub role: FeatureRole,
    pub dim: usize,
}

impl BamProvider for StoredProvider {
    fn role(&self) -> FeatureRole {
        self.role
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, video: &dyn FeatureSource, clip: ClipView) -> Result<Vec<f64>> {
        let geometry = video.geometry();
        let index = match self.role {
            FeatureRole::Motion => {
                debug_assert_eq!(clip.end_frame - clip.start_frame, geometry.clip_length);
                clip.start_frame / geometry.stride
            }
            _ => clip.index,
        };
        let row = video.stored_row(self.role, index).ok_or_else(|| Error::OutOfRange {
            what: "stored feature rows".into(),
            index,
            len: geometry.clip_count,
        })?;
        Ok(row.to_vec())
    }
}

#[derive(Clone, Debug)]
pub struct ConstantProvider {
    pub role: FeatureRole,
    pub dim: usize,
    pub value: f64,
}

impl BamProvider for ConstantProvider {
    fn role(&self) -> FeatureRole {
        self.role
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, _video: &dyn FeatureSource, _clip: ClipView) -> Result<Vec<f64>> {
        Ok(vec![self.value; self.dim])
    }
}

pub struct BamProviders {
    pub background: Box<dyn BamProvider>,
    pub appearance: Box<dyn BamProvider>,
    pub motion: Box<dyn BamProvider>,
}

impl BamProviders {
    pub fn stored(dims: [usize; 3]) -> Self {
        Self {
            background: Box::new(StoredProvider { role: FeatureRole::Background, dim: dims[0] }),
            appearance: Box::new(StoredProvider { role: FeatureRole::Appearance, dim: dims[1] }),
            motion: Box::new(StoredProvider { role: FeatureRole::Motion, dim: dims[2] }),
        }
    }

    pub fn constant(dims: [usize; 3], value: f64) -> Self {
        let p = |role, dim| Box::new(ConstantProvider { role, dim, value }) as Box<dyn BamProvider>;
        Self {
            background: p(FeatureRole::Background, dims[0]),
            appearance: p(FeatureRole::Appearance, dims[1]),
            motion: p(FeatureRole::Motion, dims[2]),
        }
    }

    fn streams(&self) -> [&dyn BamProvider; 3] {
        [self.background.as_ref(), self.appearance.as_ref(), self.motion.as_ref()]
    }
}

/// Per-clip concatenation of background, appearance and motion features.
#[derive(Clone, Debug)]
pub struct SemanticIndex {
    s: Mat,
    dims: [usize; 3],
    /// Extraction time per stream (background, appearance, motion).
    pub timings: [Duration; 3],
}

impl SemanticIndex {
    pub fn features(&self) -> &Mat {
        &self.s
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
}

/// Runs every provider once per clip and concatenates the three streams.
pub fn semantic_index(video: &dyn FeatureSource, providers: &BamProviders, dims: [usize; 3]) -> Result<SemanticIndex> {
    let c = video.geometry().clip_count;
    let total: usize = dims.iter().sum();
    let mut s = Mat::zeros(c, total);
    let mut timings = [Duration::ZERO; 3];
    let mut offset = 0;
    for (k, provider) in providers.streams().into_iter().enumerate() {
        if provider.dim() != dims[k] {
            return Err(Error::Config(format!(
                "{:?} provider yields {} features, {} declared",
                provider.role(),
                provider.dim(),
                dims[k]
            )));
        }
        let start = Instant::now();
        for i in 0..c {
            let row = provider.extract(video, ClipView::new(video.geometry(), i))?;
            if row.len() != dims[k] {
                return Err(Error::Config(format!(
                    "{:?} provider returned {} features for clip {i}, {} declared",
                    provider.role(),
                    row.len(),
                    dims[k]
                )));
            }
            s.row_mut(i)[offset..offset + dims[k]].copy_from_slice(&row);
        }
        timings[k] = start.elapsed();
        offset += dims[k];
    }
    Ok(SemanticIndex { s, dims, timings })
}

#[derive(Clone, Debug)]
struct GruParams {
    /// `input x 3H`, gate order update, reset, candidate.
    w: ParamId,
    /// `H x 3H`.
    u: ParamId,
    /// `1 x 3H`.
    b: ParamId,
}

impl GruParams {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            w: store.add_glorot(format!("{name}.w"), input, 3 * hidden, false, rng),
            u: store.add_glorot(format!("{name}.u"), hidden, 3 * hidden, false, rng),
            b: store.add(format!("{name}.b"), Mat::zeros(1, 3 * hidden), false),
        }
    }

    fn run(&self, store: &ParamStore, inputs: &[&[f64]], hidden: usize) -> Vec<Vec<f64>> {
        let (w, u, b) = (store.get(self.w), store.get(self.u), store.get(self.b));
        let mut h = vec![0.0; hidden];
        let mut out = Vec::with_capacity(inputs.len());
        for x in inputs {
            let xw = Mat::from_vec(1, x.len(), x.to_vec()).matmul(w);
            let mut next = vec![0.0; hidden];
            let mut rh = vec![0.0; hidden];
            let mut z = vec![0.0; hidden];
            for j in 0..hidden {
                let hu_z: f64 = (0..hidden).map(|k| h[k] * u.get(k, j)).sum();
                let hu_r: f64 = (0..hidden).map(|k| h[k] * u.get(k, hidden + j)).sum();
                z[j] = sigmoid(xw.data()[j] + hu_z + b.data()[j]);
                let r = sigmoid(xw.data()[hidden + j] + hu_r + b.data()[hidden + j]);
                rh[j] = r * h[j];
            }
            for j in 0..hidden {
                let hu: f64 = (0..hidden).map(|k| rh[k] * u.get(k, 2 * hidden + j)).sum();
                let cand = (xw.data()[2 * hidden + j] + hu + b.data()[2 * hidden + j]).tanh();
                next[j] = (1.0 - z[j]) * h[j] + z[j] * cand;
            }
            h = next;
            out.push(h.clone());
        }
        out
    }
}

/// Embedding table, bidirectional GRU, and a projection of the concatenated
/// directions to the query width.
#[derive(Clone, Debug)]
pub struct QueryEncoder {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub embedding: ParamId,
    forward: GruParams,
    backward: GruParams,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
}

impl QueryEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        embed_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let embedding = store.add("query.embedding", Mat::randn(vocab_size, embed_dim, 1.0, rng), false);
        let forward = GruParams::new(store, "query.gru_fwd", embed_dim, hidden, rng);
        let backward = GruParams::new(store, "query.gru_bwd", embed_dim, hidden, rng);
        let proj_weight = store.add_glorot("query.proj.weight", 2 * hidden, out_dim, false, rng);
        let proj_bias = store.add("query.proj.bias", Mat::zeros(1, out_dim), false);
        Self { vocab_size, embed_dim, hidden, out_dim, embedding, forward, backward, proj_weight, proj_bias }
    }

    /// All parameters, including the recurrent ones.
    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.embedding,
            self.forward.w,
            self.forward.u,
            self.forward.b,
            self.backward.w,
            self.backward.u,
            self.backward.b,
            self.proj_weight,
            self.proj_bias,
        ]
    }

    /// `N x out_dim` word-level features. Ids outside the vocabulary read the
    /// reserved unknown-word row 0.
    pub fn encode(&self, store: &ParamStore, tokens: &[u32]) -> Mat {
        let table = store.get(self.embedding);
        let rows: Vec<&[f64]> = tokens
            .iter()
            .map(|&t| {
                let t = t as usize;
                table.row(if t < self.vocab_size { t } else { 0 })
            })
            .collect();
        let fwd = self.forward.run(store, &rows, self.hidden);
        let reversed: Vec<&[f64]> = rows.iter().rev().copied().collect();
        let mut bwd = self.backward.run(store, &reversed, self.hidden);
        bwd.reverse();
        let states = Mat::from_fn(tokens.len(), 2 * self.hidden, |i, j| {
            if j < self.hidden {
                fwd[i][j]
            } else {
                bwd[i][j - self.hidden]
            }
        });
        let mut q = states.matmul(store.get(self.proj_weight));
        let bias = store.get(self.proj_bias);
        for i in 0..q.rows() {
            for (x, &b) in q.row_mut(i).iter_mut().zip(bias.data()) {
                *x += b;
            }
        }
        q
    }

    /// Replaces the embedding table with externally supplied vectors.
    pub fn load_embeddings(&self, store: &mut ParamStore, file: &FeatureFile) -> Result<()> {
        let expected = (self.vocab_size, self.embed_dim);
        let actual = (file.manifest.shape[0], file.manifest.shape[1]);
        if file.manifest.role != FeatureRole::Embedding || actual != expected {
            return Err(Error::Shape { what: "embedding table".into(), expected, actual });
        }
        *store.get_mut(self.embedding) = file.to_mat();
        Ok(())
    }
}

/// The expensive per-clip encoder: a two-layer ReLU network over raw clip features.
#[derive(Clone, Debug)]
pub struct ClipEncoder {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub out_dim: usize,
}

impl ClipEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, raw_dim: usize, hidden: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            w1: store.add_glorot("clip_encoder.w1", raw_dim, hidden, false, rng),
            b1: store.add("clip_encoder.b1", Mat::zeros(1, hidden), false),
            w2: store.add_glorot("clip_encoder.w2", hidden, out_dim, false, rng),
            b2: store.add("clip_encoder.b2", Mat::zeros(1, out_dim), false),
            out_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    pub fn encode_row(&self, store: &ParamStore, raw: &[f64]) -> Vec<f64> {
        let (w1, b1, w2, b2) = (store.get(self.w1), store.get(self.b1), store.get(self.w2), store.get(self.b2));
        let hidden: Vec<f64> = (0..w1.cols())
            .map(|j| {
                let z: f64 = raw.iter().enumerate().map(|(k, x)| x * w1.get(k, j)).sum::<f64>() + b1.data()[j];
                z.max(0.0)
            })
            .collect();
        (0..w2.cols())
            .map(|j| {
                let col: f64 = hidden.iter().enumerate().map(|(k, h)| h * w2.get(k, j)).sum();
                col + b2.data()[j]
            })
            .collect()
    }

    /// Every clip encoded; the no-selection baseline and the teacher's input.
    pub fn encode_all(&self, store: &ParamStore, raw: &Mat) -> Mat {
        let mut out = Mat::zeros(raw.rows(), self.out_dim);
        for i in 0..raw.rows() {
            let row = self.encode_row(store, raw.row(i));
            out.row_mut(i).copy_from_slice(&row);
        }
        out
    }

    /// Encodes clips that are newly set in `mask`, copies the ones `prior`
    /// already encoded and leaves every unselected row at zero.
    pub fn encode_selected_clips(
        &self,
        store: &ParamStore,
        raw: &Mat,
        mask: &[bool],
        prior: &MaskedClipFeatures,
    ) -> Result<MaskedClipFeatures> {
        if mask.len() != raw.rows() || prior.mask.len() != raw.rows() {
            return Err(Error::Shape {
                what: "selection mask".into(),
                expected: (raw.rows(), 1),
                actual: (mask.len(), 1),
            });
        }
        if let Some(clip) = prior.mask.iter().zip(mask).position(|(&p, &m)| p && !m) {
            return Err(Error::MaskShrinkage { clip });
        }
        let mut features = prior.features.clone();
        let mut calls = 0;
        for (i, (&m, &p)) in mask.iter().zip(&prior.mask).enumerate() {
            if m && !p {
                let row = self.encode_row(store, raw.row(i));
                features.row_mut(i).copy_from_slice(&row);
                calls += 1;
            }
        }
        Ok(MaskedClipFeatures {
            features,
            mask: mask.to_vec(),
            call_count: calls,
            total_calls: prior.total_calls + calls,
        })
    }
}

/// Expensive clip features with unselected rows held at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedClipFeatures {
    pub features: Mat,
    pub mask: Vec<bool>,
    /// Clips encoded by the step that produced this value.
    pub call_count: usize,
    /// Clips encoded so far for this video.
    pub total_calls: usize,
}

impl MaskedClipFeatures {
    /// Nothing selected: the all-zero matrix.
    pub fn empty(clips: usize, width: usize) -> Self {
        Self { features: Mat::zeros(clips, width), mask: vec![false; clips], call_count: 0, total_calls: 0 }
    }

    pub fn selected(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Row `i` of `encoded` if `mask[i]`, else zero.
pub fn mask_rows(encoded: &Mat, mask: &[bool]) -> Mat {
    Mat::from_fn(encoded.rows(), encoded.cols(), |r, c| if mask[r] { encoded.get(r, c) } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, CorpusConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> SyntheticSample {
        let cfg = CorpusConfig { samples: 1, min_frames: 160, max_frames: 160, ..Default::default() };
        generate_synthetic_corpus(0, &cfg).unwrap().remove(0)
    }

    #[test]
    fn semantic_index_shape_and_zero_providers() {
        let s = sample();
        let idx = semantic_index(&s, &BamProviders::stored([16, 16, 16]), [16, 16, 16]).unwrap();
        assert_eq!(idx.features().shape(), (19, 48));
        assert_eq!(idx.features().row(3)[..16], s.background.row(3)[..]);
        assert_eq!(idx.features().row(3)[32..], s.motion.row(3)[..]);
        let zero = semantic_index(&s, &BamProviders::constant([16, 16, 16], 0.0), [16, 16, 16]).unwrap();
        assert_eq!(zero.features().max_abs(), 0.0);
    }

    #[test]
    fn semantic_index_is_deterministic() {
        let s = sample();
        let p = BamProviders::stored([16, 16, 16]);
        let a = semantic_index(&s, &p, [16, 16, 16]).unwrap();
        let b = semantic_index(&s, &p, [16, 16, 16]).unwrap();
        assert_eq!(a.features(), b.features());
    }

    #[test]
    fn provider_dimension_mismatch_is_a_config_error() {
        let s = sample();
        let err = semantic_index(&s, &BamProviders::stored([16, 16, 16]), [16, 8, 16]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn motion_provider_reads_through_clip_frames() {
        let s = sample();
        let p = StoredProvider { role: FeatureRole::Motion, dim: 16 };
        let view = ClipView::new(&s.geometry, 7);
        assert_eq!((view.start_frame, view.end_frame), (56, 72));
        assert_eq!(p.extract(&s, view).unwrap(), s.motion.row(7));
    }

    fn encoder(store: &mut ParamStore) -> QueryEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        QueryEncoder::new(store, 50, 12, 6, 8, &mut rng)
    }

    #[test]
    fn query_shape_and_unknown_ids() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store);
        assert_eq!(enc.encode(&store, &[5]).shape(), (1, 8));
        let q = enc.encode(&store, &[3, 999, 7]);
        assert_eq!(q.shape(), (3, 8));
        assert_eq!(q, enc.encode(&store, &[3, 0, 7]));
        assert!(enc.params().iter().all(|&p| !store.param(p).trainable));
    }

    #[test]
    fn query_encoder_is_order_sensitive() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store);
        let tokens = [4, 9, 17, 23, 30];
        let reversed: Vec<u32> = tokens.iter().rev().copied().collect();
        let a = enc.encode(&store, &tokens);
        let b = enc.encode(&store, &reversed);
        // Row i of the forward order and row N-1-i of the reverse see the same word.
        let differs = (0..tokens.len()).any(|i| a.row(i) != b.row(tokens.len() - 1 - i));
        assert!(differs);
        assert_eq!(enc.encode(&store, &tokens), a);
    }

    #[test]
    fn zero_weights_give_bias_determined_rows() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store);
        let bias = Mat::from_fn(1, 8, |_, j| j as f64 - 3.0);
        for id in enc.params() {
            let shape = store.get(id).shape();
            *store.get_mut(id) = Mat::zeros(shape.0, shape.1);
        }
        *store.get_mut(enc.proj_bias) = bias.clone();
        let q = enc.encode(&store, &[1, 2, 3, 4]);
        for i in 0..4 {
            assert_eq!(q.row(i), bias.data());
        }

        // With recurrent biases the state follows h_t = (1 - (1 - z)^t) tanh(b_h).
        let (bz, bh) = (0.3, 0.8);
        for gru in [&enc.forward, &enc.backward] {
            let b = store.get_mut(gru.b);
            for j in 0..6 {
                b.set(0, j, bz);
                b.set(0, 12 + j, bh);
            }
        }
        *store.get_mut(enc.proj_weight) = Mat::from_fn(12, 8, |r, c| if r == c { 1.0 } else { 0.0 });
        *store.get_mut(enc.proj_bias) = Mat::zeros(1, 8);
        let q = enc.encode(&store, &[1, 2, 3, 4]);
        let z = sigmoid(bz);
        for t in 0..4 {
            let fwd = (1.0 - (1.0 - z).powi(t as i32 + 1)) * bh.tanh();
            let bwd = (1.0 - (1.0 - z).powi(4 - t as i32)) * bh.tanh();
            assert!((q.get(t, 0) - fwd).abs() < 1e-12);
            assert!((q.get(t, 6) - bwd).abs() < 1e-12);
        }
    }

    fn clip_encoder() -> (ParamStore, ClipEncoder, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = ClipEncoder::new(&mut store, 6, 10, 4, &mut rng);
        let raw = Mat::randn(9, 6, 1.0, &mut rng);
        (store, enc, raw)
    }

    #[test]
    fn encode_selected_clips_counts_only_new_clips() {
        let (store, enc, raw) = clip_encoder();
        let empty = MaskedClipFeatures::empty(9, 4);
        let none = enc.encode_selected_clips(&store, &raw, &[false; 9], &empty).unwrap();
        assert_eq!(none.call_count, 0);
        assert_eq!(none.features.max_abs(), 0.0);

        let all = enc.encode_selected_clips(&store, &raw, &[true; 9], &empty).unwrap();
        assert_eq!(all.call_count, 9);
        assert_eq!(all.features, enc.encode_all(&store, &raw));

        let mut mask = [false; 9];
        mask[2] = true;
        mask[5] = true;
        let first = enc.encode_selected_clips(&store, &raw, &mask, &empty).unwrap();
        assert_eq!(first.call_count, 2);
        mask[7] = true;
        let second = enc.encode_selected_clips(&store, &raw, &mask, &first).unwrap();
        assert_eq!(second.call_count, 1);
        assert_eq!(second.total_calls, 3);
        for i in [2, 5] {
            let bits = |m: &Mat| m.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&second.features), bits(&first.features));
        }
        for i in [0, 1, 3, 4, 6, 8] {
            assert_eq!(second.features.row(i).iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);
        }
    }

    #[test]
    fn mask_shrinkage_is_rejected() {
        let (store, enc, raw) = clip_encoder();
        let empty = MaskedClipFeatures::empty(9, 4);
        let mut mask = [false; 9];
        mask[4] = true;
        let first = enc.encode_selected_clips(&store, &raw, &mask, &empty).unwrap();
        let err = enc.encode_selected_clips(&store, &raw, &[false; 9], &first).unwrap_err();
        assert!(matches!(err, Error::MaskShrinkage { clip: 4 }));
    }

    #[test]
    fn embedding_import_checks_shape() {
        let mut store = ParamStore::new();
        let enc = encoder(&mut store);
        let good = FeatureFile::new("glove", FeatureRole::Embedding, 50, 12, vec![0.25; 600]).unwrap();
        enc.load_embeddings(&mut store, &good).unwrap();
        assert_eq!(store.get(enc.embedding).get(49, 11), 0.25);
        let bad = FeatureFile::new("glove", FeatureRole::Embedding, 50, 11, vec![0.0; 550]).unwrap();
        assert!(enc.load_embeddings(&mut store, &bad).is_err());
    }
}
