//! Cross-modal interaction, highlight scoring and span prediction.

use std::cmp::Ordering;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::nn::{Linear, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;

/// Self-attention over each stream followed by context-query attention.
///
/// Similarity is the trilinear form `w_x·x_i + w_q·q_j + w_xq·(x_i∘q_j)`.
#[derive(Clone, Debug)]
pub struct CrossModalEncoder {
    pub width: usize,
    pub max_clips: usize,
    pub video_in: Linear,
    pub query_in: Linear,
    pub positions: ParamId,
    pub video_block: TransformerBlock,
    pub query_block: TransformerBlock,
    pub w_x: ParamId,
    pub w_q: ParamId,
    pub w_xq: ParamId,
    pub out: Linear,
}

impl CrossModalEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        video_width: usize,
        query_width: usize,
        width: usize,
        heads: usize,
        max_clips: usize,
        rng: &mut R,
    ) -> Self {
        let ff = 2 * width;
        Self {
            width,
            max_clips,
            video_in: Linear::new(store, &format!("{name}.video_in"), video_width, width, rng),
            query_in: Linear::new(store, &format!("{name}.query_in"), query_width, width, rng),
            positions: store.add(format!("{name}.positions"), Mat::randn(max_clips, width, 0.1, rng), true),
            video_block: TransformerBlock::new(store, &format!("{name}.video_block"), width, heads, ff, rng),
            query_block: TransformerBlock::new(store, &format!("{name}.query_block"), width, heads, ff, rng),
            w_x: store.add_glorot(format!("{name}.cqa.w_x"), width, 1, true, rng),
            w_q: store.add_glorot(format!("{name}.cqa.w_q"), width, 1, true, rng),
            w_xq: store.add_glorot(format!("{name}.cqa.w_xq"), 1, width, true, rng),
            out: Linear::new(store, &format!("{name}.out"), 4 * width, width, rng),
        }
    }

    /// `x` is `C x video_width`, `q` is `N x query_width`; returns `C x width`.
    pub fn forward(&self, g: &mut Graph, x: Var, q: Var) -> Var {
        let clips = g.value(x).rows();
        assert!(clips <= self.max_clips, "{clips} clips exceed the positional table ({})", self.max_clips);
        let x = self.video_in.forward(g, x);
        let pos = g.param(self.positions);
        let pos = g.slice_rows(pos, 0, clips);
        let x = g.add(x, pos);
        let x = g.dropout(x);
        let x = self.video_block.forward(g, x);
        let q = self.query_in.forward(g, q);
        let q = g.dropout(q);
        let q = self.query_block.forward(g, q);

        let w_x = g.param(self.w_x);
        let w_q = g.param(self.w_q);
        let w_xq = g.param(self.w_xq);
        let sx = g.matmul(x, w_x);
        let sq = g.matmul(q, w_q);
        let sq = g.transpose(sq);
        let xw = g.mul_row(x, w_xq);
        let sim = g.matmul_bt(xw, q);
        let sim = g.add_col(sim, sx);
        let sim = g.add_row(sim, sq);

        let row_soft = g.softmax_rows(sim);
        let sim_t = g.transpose(sim);
        let col_soft_t = g.softmax_rows(sim_t);
        let a = g.matmul(row_soft, q);
        let clip_to_clip = g.matmul(row_soft, col_soft_t);
        let b = g.matmul(clip_to_clip, x);
        let xa = g.mul(x, a);
        let xb = g.mul(x, b);
        let cat = g.concat_cols(&[x, a, xa, xb]);
        self.out.forward(g, cat)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.video_in.params();
        p.extend(self.query_in.params());
        p.push(self.positions);
        p.extend(self.video_block.params());
        p.extend(self.query_block.params());
        p.extend([self.w_x, self.w_q, self.w_xq]);
        p.extend(self.out.params());
        p
    }
}

/// Kernel-3 convolution over the clip axis producing one highlight logit per clip.
#[derive(Clone, Debug)]
pub struct Highlight {
    /// `3W x 1`: taps for clips i-1, i, i+1.
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct HighlightOut {
    /// `C x 1` pre-sigmoid scores.
    pub logits: Var,
    pub scores: Var,
    pub scaled: Var,
}

impl Highlight {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_glorot(format!("{name}.weight"), 3 * width, 1, true, rng),
            bias: store.add(format!("{name}.bias"), Mat::zeros(1, 1), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, c: Var) -> HighlightOut {
        let prev = g.shift_rows(c, -1);
        let next = g.shift_rows(c, 1);
        let window = g.concat_cols(&[prev, c, next]);
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let logits = g.matmul(window, w);
        let logits = g.add_row(logits, b);
        let scores = g.sigmoid(logits);
        let scaled = g.mul_col(c, scores);
        HighlightOut { logits, scores, scaled }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Transformer block and independent start/end heads.
#[derive(Clone, Debug)]
pub struct SpanPredictor {
    pub block: TransformerBlock,
    pub start: Linear,
    pub end: Linear,
}

impl SpanPredictor {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            block: TransformerBlock::new(store, &format!("{name}.block"), width, heads, 2 * width, rng),
            start: Linear::new(store, &format!("{name}.start"), width, 1, rng),
            end: Linear::new(store, &format!("{name}.end"), width, 1, rng),
        }
    }

    /// Start and end log-probabilities, each `1 x C`.
    pub fn forward(&self, g: &mut Graph, c: Var) -> (Var, Var) {
        let h = self.block.forward(g, c);
        let s = self.start.forward(g, h);
        let s = g.transpose(s);
        let e = self.end.forward(g, h);
        let e = g.transpose(e);
        (g.log_softmax_rows(s), g.log_softmax_rows(e))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.block.params();
        p.extend(self.start.params());
        p.extend(self.end.params());
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSpan {
    pub start: usize,
    pub end: usize,
    pub joint: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanPrediction {
    pub log_p_s: Vec<f64>,
    pub log_p_e: Vec<f64>,
    pub top_k: Vec<ScoredSpan>,
}

impl SpanPrediction {
    pub fn new(log_p_s: Vec<f64>, log_p_e: Vec<f64>, k: usize) -> Self {
        let p_s: Vec<f64> = log_p_s.iter().map(|x| x.exp()).collect();
        let p_e: Vec<f64> = log_p_e.iter().map(|x| x.exp()).collect();
        let top_k = top_k_spans(&p_s, &p_e, k);
        Self { log_p_s, log_p_e, top_k }
    }
}

/// The `k` valid pairs `i <= j` with the largest `p_s[i] * p_e[j]`, best first.
/// Ties keep the earlier pair. `k` is clamped to the number of valid pairs.
pub fn top_k_spans(p_s: &[f64], p_e: &[f64], k: usize) -> Vec<ScoredSpan> {
    assert_eq!(p_s.len(), p_e.len(), "start and end distributions differ in length");
    let c = p_s.len();
    let k = k.min(c * (c + 1) / 2);
    let mut best: Vec<ScoredSpan> = Vec::with_capacity(k + 1);
    for i in 0..c {
        for j in i..c {
            let joint = p_s[i] * p_e[j];
            if best.len() == k && best.last().is_some_and(|w| w.joint >= joint) {
                continue;
            }
            let at = best.partition_point(|s| s.joint >= joint);
            best.insert(at, ScoredSpan { start: i, end: j, joint });
            best.truncate(k);
        }
    }
    best
}

/// Ordering used by [`top_k_spans`]: higher joint first, then scan order.
pub fn span_order(a: &ScoredSpan, b: &ScoredSpan) -> Ordering {
    b.joint
        .partial_cmp(&a.joint)
        .unwrap_or(Ordering::Equal)
        .then(a.start.cmp(&b.start))
        .then(a.end.cmp(&b.end))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> CrossModalEncoder {
        CrossModalEncoder::new(store, "fusion", 24, 16, 64, 4, 32, rng)
    }

    #[test]
    fn cross_modal_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(Mat::randn(19, 24, 1.0, &mut rng));
        let q = g.constant(Mat::randn(7, 16, 1.0, &mut rng));
        let c = enc.forward(&mut g, x, q);
        assert_eq!(g.value(c).shape(), (19, 64));
        assert!(g.value(c).all_finite());
    }

    #[test]
    fn row_permutation_is_not_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = encoder(&mut store, &mut rng);
        let x = Mat::randn(10, 24, 1.0, &mut rng);
        let q = Mat::randn(5, 16, 1.0, &mut rng);
        let perm: Vec<usize> = (0..10).rev().collect();
        let px = Mat::from_fn(10, 24, |r, c| x.get(perm[r], c));
        let run = |x: Mat| {
            let mut g = Graph::new(&store);
            let x = g.constant(x);
            let q = g.constant(q.clone());
            let c = enc.forward(&mut g, x, q);
            g.value(c).clone()
        };
        let plain = run(x);
        let permuted = run(px);
        let unpermuted = Mat::from_fn(10, 64, |r, c| permuted.get(perm.iter().position(|&p| p == r).unwrap(), c));
        let diff = plain.zip_map(&unpermuted, |a, b| a - b).max_abs();
        assert!(diff > 1e-6, "positional embeddings should break equivariance, diff {diff}");
    }

    #[test]
    fn residual_only_parameters_reduce_to_projected_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = CrossModalEncoder::new(&mut store, "fusion", 8, 8, 8, 2, 16, &mut rng);
        // Zero everything except the layer-norm gains, the input projection and
        // the x-block of the output projection.
        let keep: Vec<ParamId> = [enc.video_in.weight]
            .into_iter()
            .chain([&enc.video_block, &enc.query_block].iter().flat_map(|b| [b.norm1.gain, b.norm2.gain]))
            .chain([enc.out.weight])
            .collect();
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            if !keep.contains(&id) {
                let (r, c) = store.get(id).shape();
                *store.get_mut(id) = Mat::zeros(r, c);
            }
        }
        let w_out = Mat::from_fn(32, 8, |r, c| if r < 8 { store.get(enc.out.weight).get(r, c) } else { 0.0 });
        *store.get_mut(enc.out.weight) = w_out.clone();

        let x = Mat::randn(6, 8, 1.0, &mut rng);
        let q = Mat::randn(3, 8, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let qv = g.constant(q);
        let c = enc.forward(&mut g, xv, qv);

        // With zero attention and feed-forward weights each block is two layer norms.
        let norm = |m: &Mat| {
            let mut out = m.clone();
            for i in 0..out.rows() {
                let row = out.row_mut(i);
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                for v in row {
                    *v = (*v - mean) / (var + 1e-5).sqrt();
                }
            }
            out
        };
        let h = norm(&norm(&x.matmul(store.get(enc.video_in.weight))));
        let expected = h.matmul(&Mat::from_fn(8, 8, |r, c| w_out.get(r, c)));
        assert!(g.value(c).zip_map(&expected, |a, b| a - b).max_abs() < 1e-9);
    }

    fn highlight_case(bias: f64) -> (Mat, Mat, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let h = Highlight::new(&mut store, "highlight", 5, &mut rng);
        *store.get_mut(h.weight) = Mat::zeros(15, 1);
        *store.get_mut(h.bias) = Mat::scalar(bias);
        let c = Mat::randn(7, 5, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let cv = g.constant(c.clone());
        let out = h.forward(&mut g, cv);
        (c, g.value(out.scores).clone(), g.value(out.scaled).clone())
    }

    #[test]
    fn highlight_saturation() {
        let (c, scores, scaled) = highlight_case(100.0);
        assert!(scores.data().iter().all(|&s| (s - 1.0).abs() < 1e-12));
        assert!(scaled.zip_map(&c, |a, b| a - b).max_abs() < 1e-12);
        let (_, scores, scaled) = highlight_case(-100.0);
        assert!(scores.data().iter().all(|&s| s < 1e-40));
        assert!(scaled.max_abs() < 1e-40);
    }

    #[test]
    fn highlight_scores_are_open_and_shrink_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut store = ParamStore::new();
            let h = Highlight::new(&mut store, "highlight", 6, &mut rng);
            let mut g = Graph::new(&store);
            let c = g.constant(Mat::randn(9, 6, 2.0, &mut rng));
            let out = h.forward(&mut g, c);
            assert!(g.value(out.scores).data().iter().all(|&s| s > 0.0 && s < 1.0));
            assert!(g.value(out.scaled).frobenius_norm() <= g.value(c).frobenius_norm());
        }
    }

    #[test]
    fn span_distributions_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let sp = SpanPredictor::new(&mut store, "span", 16, 4, &mut rng);
        let mut g = Graph::new(&store);
        let c = g.constant(Mat::randn(12, 16, 3.0, &mut rng));
        let (s, e) = sp.forward(&mut g, c);
        for v in [s, e] {
            assert_eq!(g.value(v).shape(), (1, 12));
            let total: f64 = g.value(v).data().iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn top_k_examples() {
        let top = top_k_spans(&[0.7, 0.2, 0.1], &[0.1, 0.2, 0.7], 1);
        assert_eq!((top[0].start, top[0].end), (0, 2));
        assert!((top[0].joint - 0.49).abs() < 1e-12);

        let top = top_k_spans(&[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0], 1);
        assert_eq!((top[0].start, top[0].end), (2, 2));

        let top = top_k_spans(&[0.6, 0.4], &[0.3, 0.7], 5);
        assert_eq!(top.len(), 3);
        assert!(top.windows(2).all(|w| w[0].joint >= w[1].joint));
    }

    fn brute_force(p_s: &[f64], p_e: &[f64], k: usize) -> Vec<ScoredSpan> {
        let mut all = Vec::new();
        for i in 0..p_s.len() {
            for j in i..p_e.len() {
                all.push(ScoredSpan { start: i, end: j, joint: p_s[i] * p_e[j] });
            }
        }
        all.sort_by(span_order);
        all.truncate(k);
        all
    }

    fn normalized(v: Vec<f64>) -> Vec<f64> {
        let total: f64 = v.iter().sum();
        v.into_iter().map(|x| x / total).collect()
    }

    proptest! {
        #[test]
        fn top_k_matches_brute_force(
            c in 1usize..=20,
            k in 1usize..40,
            seed in any::<u64>(),
            coarse in any::<bool>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Coarse values produce many ties.
            let mut draw = |_| if coarse { rng.gen_range(1..4) as f64 } else { rng.gen::<f64>() + 1e-3 };
            let p_s = normalized((0..c).map(&mut draw).collect());
            let p_e = normalized((0..c).map(&mut draw).collect());
            let fast = top_k_spans(&p_s, &p_e, k);
            prop_assert_eq!(&fast, &brute_force(&p_s, &p_e, k));
            prop_assert!(fast.iter().all(|s| s.start <= s.end));
        }
    }
}
